//! Class similarity measures and nested group hierarchies built from them.

mod hierarchy;
mod similarity;

pub use hierarchy::{agglomerative, random_hierarchy, validate_group_counts, ClassGroup, HierarchyTree, NodeId};
pub use similarity::{
    confusion_from_scores, confusion_similarity, features_by_class, parse_scalar_file, scalar_similarity,
    visual_similarity, SimilarityMatrix,
};
