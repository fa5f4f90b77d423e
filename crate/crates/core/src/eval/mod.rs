pub mod ablation;
pub mod plot;
pub mod report;

pub use ablation::{run_ablation, run_point, AblationGrid, AblationResult, AblationRow, Axis, PointSettings, TrendRow};
pub use plot::forgetting_svg;
pub use report::{compare, evaluate, evaluate_languages, stream_perplexity, EvalReport, ForgettingDelta};
