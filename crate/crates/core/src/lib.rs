//! Line-level process supervision for code generation.
//!
//! The crate covers the whole pipeline: an MBPP-style corpus model, per-line
//! mutation and refactoring of reference solutions, sandboxed verification
//! of the edited programs, construction of step-level (prefix, label)
//! datasets, test augmentation driven by mutation-kill adequacy, hashed
//! feature reward models (process- and outcome-supervised), PPO with
//! segment-level rewards on a small program-synthesis environment, and
//! pass@k evaluation.

pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod mutator;
pub mod pylex;
pub mod reward;
pub mod rl;
pub mod sandbox;
pub mod synth;
pub mod teacher;
pub mod testgen;
pub mod util;

pub use corpus::{CodeLines, Corpus, Problem, Split, TestCase, TestOrigin};
pub use dataset::{DatasetSplit, Label, SampleSource, StepSample};
pub use mutator::{EditMode, LineEdit, MutationRuleSet};
pub use reward::{FeatureVector, RewardKind, RewardModel, RewardTrace};
pub use sandbox::{ExecutionVerdict, ResourceLimits, Sandbox, VerdictStatus};
