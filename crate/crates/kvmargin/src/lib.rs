//! File formats, reports, batch pipeline and command-line interface around
//! [`kvmargin_core`].

pub mod checks;
pub mod cli;
pub mod error;
pub mod format;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use format::{load_dump, write_dump};
