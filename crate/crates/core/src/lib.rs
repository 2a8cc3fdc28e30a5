// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod fixtures;
pub mod localization;
pub mod persona;
pub mod refmodel;
pub mod sites;
pub mod steering;
pub mod tensorfile;
pub mod tokenizer;
pub mod util;

pub use error::{Error, Result};
