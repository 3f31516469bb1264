use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("episode error: {0}")]
    Episode(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("undefined score: {0}")]
    UndefinedScore(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Load(_) => 2,
            Error::Data(_)
            | Error::Episode(_)
            | Error::Input(_)
            | Error::UndefinedScore(_)
            | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
