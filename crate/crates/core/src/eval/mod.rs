//! Classification metrics, t-SNE embedding and result export.

mod export;
mod metrics;
mod tsne;

pub use export::{
    hundredths, read_features_csv, write_confusion_csv, write_curves_csv, write_embedding_csv,
    write_epoch_averages_csv, write_feature_maps, write_features_csv, write_metrics_csv, CurveRow,
    CURVE_HEADER,
};
pub use metrics::{
    confusion_matrix, macro_stats, metrics_from_cm, topk_accuracy, ClassMetrics, ConfusionMatrix,
    MacroStat, MetricsReport,
};
pub use tsne::{tsne_embed, Embedding, TsneConfig};
