//! Attack evaluation: metrics, defenses, transfer reports and embedding diagnostics.

mod defense;
mod metrics;
mod pca;
mod report;
mod zeroshot;

pub use defense::{median_blur, pgd_attack, Defense, PgdConfig};
pub use metrics::{
    argmax, context_consistency_score, hamming_score, harmonic_context, top1_accuracy, ContextScore,
};
pub use pca::{
    centroid_separation, jacobi_eigenvalues, pca_embed_export, pca_top2, PcaExport, PcaResult,
};
pub use report::{
    ablation_summary, check_budget, context_rows_csv, context_summary, evaluate_attack, method_of,
    parse_context_csv, parse_report_csv, pca_summary, report_csv, transfer_matrix, AblationArm,
    AttackReport, AttackRow, ContextRow, GeneratorInfo, IdentityPerturber, Perturber, Scenario,
    Victim, VictimSpec, ABLATION_ARMS,
};
pub use zeroshot::{label_shift_rate, zero_shot_label_shift};
