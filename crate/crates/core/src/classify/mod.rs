//! Bag features and decision-tree classification.

mod features;
mod select;
mod tree;

pub use features::*;
pub use select::*;
pub use tree::*;
