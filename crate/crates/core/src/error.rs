use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("ill-conditioned regression: {block} block is rank deficient (rank {rank} < {cols})")]
    IllConditioned {
        block: &'static str,
        rank: usize,
        cols: usize,
    },

    #[error("underdetermined fit: {samples} samples for {unknowns} regressors")]
    Underdetermined { samples: usize, unknowns: usize },

    #[error("degenerate heading: cos/sin observables are both zero")]
    DegenerateHeading,

    #[error("degenerate half-space normal: agent at center of obstacle {obstacle}")]
    DegenerateNormal { obstacle: u32 },

    #[error("empty score set")]
    EmptyScores,

    #[error("weights do not form a distribution: {0}")]
    UnnormalizedWeights(String),

    #[error(
        "conformal quantile is infinite (n = {n}, alpha = {alpha}); \
         collect more calibration pairs or raise alpha"
    )]
    InfiniteQuantile { n: usize, alpha: f64 },

    #[error("invalid QP: {0}")]
    InvalidProblem(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.to_string(),
        }
    }
}
