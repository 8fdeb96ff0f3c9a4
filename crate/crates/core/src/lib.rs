pub mod bed;
pub mod elicit_loop;
pub mod elicitation;
pub mod error;
pub mod events;
pub mod experiment;
pub mod gmm;
pub mod graph;
pub mod likelihood;
pub mod metrics;
pub mod mixture;
pub mod oracle;
pub mod svgd;
pub mod synthetic;

pub use error::{Error, Result};
