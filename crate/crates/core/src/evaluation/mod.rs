//! Answer metrics, the prompt-concatenation baseline and the experiment suite.

pub mod experiments;
pub mod lab;
pub mod latency;
pub mod metrics;
pub mod report;
pub mod weights;

pub use experiments::{
    noise_drop, peak_to_last_drop, run_decoupling, run_depth_ablation, run_noise, run_shuffle, DecouplingRow,
    DepthRow, NoiseRow, ShuffleRow,
};
pub use lab::{Lab, LabConfig, Retrieved, Trained};
pub use latency::{percentile, run_latency, LatencyReport, LatencySettings};
pub use metrics::{choice_accuracy, exact_match, normalize_answer, token_f1};
pub use report::{write_csv, Condition, EvalRecord, EvalReport, Method};
pub use weights::{answer_weight_share, export_weights, gate_means, read_weights, write_weights, WeightRow};
