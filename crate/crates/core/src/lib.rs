//! Neural architecture search over stacked message-passing networks for
//! graph regression: graph data handling, the search space, the model
//! builder, training, evolutionary search and operation importance.

pub mod error;
pub mod graph_data;
pub mod importance;
pub mod mpnn;
pub mod search;
pub mod search_space;
pub mod trainer;

pub use error::{NasError, Result};
