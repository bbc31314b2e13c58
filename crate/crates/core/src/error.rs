use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty set: components {components:?} inverted ({context})")]
    EmptySet {
        components: Vec<usize>,
        context: String,
    },

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("error trajectory diverged at rollout {rollout}, step {step} (|xi| = {norm:e})")]
    Unstable { rollout: usize, step: usize, norm: f64 },

    #[error("tube too large: tightened {set} is empty in components {components:?}")]
    TubeTooLarge {
        set: &'static str,
        components: Vec<usize>,
    },

    #[error("QP infeasible: violated block `{block}`")]
    Infeasible { block: &'static str },

    #[error("QP did not converge in {iterations} iterations (primal {primal:e}, dual {dual:e})")]
    NotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("degenerate camera pose: {0}")]
    DegeneratePose(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("augmentation failed: {0}")]
    Augmentation(String),

    #[error("demonstration rejected: {0}")]
    DemoRejected(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    AtRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub fn at_round(self, round: usize) -> Self {
        Error::AtRound {
            round,
            source: Box::new(self),
        }
    }
}
