//! Annotation agreement, dataset statistics and category clustering.

pub mod agreement;
pub mod cluster;
pub mod stats;

pub use agreement::{agreement_report, dimension_sd, fleiss_kappa, person_agreement, write_agreement_report, AgreementReport, CategoryPrevalence};
pub use cluster::{cluster_category_patterns, write_clusters, CategoryCluster};
pub use stats::{
    cooccurrence, corpus_statistics, cross_tabulate, dimension_by_category, write_cross_tab, write_dimension_profiles, CooccurrenceMatrix,
    CorpusStatistics, CrossTab, CrossTabRow,
};
