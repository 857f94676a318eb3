use thiserror::Error;

/// Errors from registry, lifecycle and kernel operations.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("module {0:?} is already registered")]
    DuplicateId(String),
    #[error("route collision on {0}")]
    RouteCollision(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("unknown module {0:?}")]
    UnknownModule(String),
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("version {requested} is not newer than active {active}")]
    VersionNotNewer { active: String, requested: String },
    #[error("start failed: {0}")]
    StartFailure(String),
    #[error("start timed out: {0}")]
    StartTimeout(String),
    #[error("module {0:?} has no superseded deployment to roll back to")]
    NothingToRollBackTo(String),
    #[error("replicas {requested} above maximum {max}")]
    AboveMax { requested: u32, max: u32 },
    #[error("replicas must be at least 1 (unregister to remove a module)")]
    InvalidReplicas,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{0:?} is a resident kernel server")]
    KernelServer(String),
    #[error("module {0:?} has no control hook")]
    UnsupportedFault(String),
    #[error("action failed: {0}")]
    ActionFailed(String),
    #[error("invalid config field {0}")]
    InvalidConfig(String),
    #[error("address in use: {0}")]
    AddrInUse(String),
    #[error("io: {0}")]
    Io(String),
}

impl KernelError {
    /// HTTP status for the admin API.
    pub fn status(&self) -> u16 {
        use KernelError::*;
        match self {
            UnknownModule(_) | UnknownInstance(_) => 404,
            DuplicateId(_) | RouteCollision(_) | VersionNotNewer { .. } | NothingToRollBackTo(_) | KernelServer(_)
            | Precondition(_) | UnsupportedFault(_) | AddrInUse(_) => 409,
            InvalidDescriptor(_) | AboveMax { .. } | InvalidReplicas | InvalidConfig(_) => 400,
            StartFailure(_) | StartTimeout(_) | ActionFailed(_) | Io(_) => 500,
        }
    }

    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        use KernelError::*;
        match self {
            DuplicateId(_) => "DuplicateId",
            RouteCollision(_) => "RouteCollision",
            InvalidDescriptor(_) => "InvalidDescriptor",
            UnknownModule(_) => "UnknownModule",
            UnknownInstance(_) => "UnknownInstance",
            VersionNotNewer { .. } => "VersionNotNewer",
            StartFailure(_) => "StartFailure",
            StartTimeout(_) => "StartTimeout",
            NothingToRollBackTo(_) => "NothingToRollBackTo",
            AboveMax { .. } => "AboveMax",
            InvalidReplicas => "InvalidReplicas",
            Precondition(_) => "Precondition",
            KernelServer(_) => "KernelServer",
            UnsupportedFault(_) => "UnsupportedFault",
            ActionFailed(_) => "ActionFailed",
            InvalidConfig(_) => "InvalidConfig",
            AddrInUse(_) => "AddrInUse",
            Io(_) => "Io",
        }
    }
}

pub type KResult<T> = Result<T, KernelError>;
