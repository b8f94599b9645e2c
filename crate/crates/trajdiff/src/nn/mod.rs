//! Neural network foundations: an autodiff tape, parameter layout
//! management, and transformer building blocks.

pub mod params;
pub mod tape;
pub mod transformer;

pub use params::{flatten_gradients, Init, Layout, LayoutBuilder, Loader, ParamVisitor};
pub use tape::{Gradients, Matrix, Tape, Var};
