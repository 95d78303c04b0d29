//! Experiments: decode fidelity under compression, column-row sampling error,
//! planted needles, retention distributions and the allocation ablation.

pub mod ablation;
pub mod crs;
pub mod fidelity;
pub mod needle;
pub mod retention;

pub use ablation::{run_ablation, AblationRow, AblationSummary, AblationVariant};
pub use crs::{crs_error, crs_rank_indices, CrsInstance, CrsRanking, CrsTrial};
pub use fidelity::{measure_fidelity, FidelityReport, FidelityTrial, LayerFidelity, OutputSite};
pub use needle::{plant_needle, NeedleInstance, NeedleOutcome, NeedleSpec};
pub use retention::{retention_report, write_retention_csv};
