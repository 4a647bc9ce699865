use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("node {node} ({op}): {msg}")]
    Node {
        node: usize,
        op: &'static str,
        msg: String,
    },
    #[error("unbound leaf `{0}`")]
    Unbound(String),
    #[error("loss node {0} is not scalar")]
    NonScalarLoss(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("joint value {value} outside limits [{lo}, {hi}]")]
    JointLimit { value: f64, lo: f64, hi: f64 },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
