#![allow(unused_imports)]

pub use vbpt_core::presets::{small_grammar, tiny_language, tiny_language_run, tiny_vision, tiny_vision_run};
