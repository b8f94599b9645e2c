//! Parameter bookkeeping: a single wiring function per network describes
//! every parameter once, and two visitors consume that description.
//!
//! [`LayoutBuilder`] walks the wiring to assign each parameter a named range
//! in one flat `Vec<f64>`; [`Loader`] walks the identical wiring to turn the
//! flat vector into tape leaves for a forward pass. Because both visitors
//! see the same call sequence, the flat layout and the tape leaves can never
//! disagree about parameter order, which keeps optimizer state, checkpoints,
//! and gradients aligned by construction.

use crate::nn::tape::{Gradients, Matrix, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How a parameter is filled at initialization time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(rows), 1/sqrt(rows)]`; the default for weight
    /// matrices applied as `x @ w`.
    FanInUniform,
    /// Uniform in `[-1/sqrt(cols), 1/sqrt(cols)]`; for free vectors such as
    /// the learned null token.
    SmallUniform,
    Zeros,
    Ones,
}

/// One visitor callback per parameter; implementations decide what a
/// parameter handle is.
pub trait ParamVisitor {
    type Handle;

    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Self::Handle;
}

/// Location of one named parameter inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Complete parameter map of one model: names, shapes, and flat offsets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Layout {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Freshly initialized flat parameter vector; identical for identical
    /// seeds.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; self.total];
        for e in &self.entries {
            let slot = &mut out[e.offset..e.offset + e.len()];
            match e.init {
                Init::FanInUniform => {
                    let bound = 1.0 / (e.rows as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
                    }
                }
                Init::SmallUniform => {
                    let bound = 1.0 / (e.cols as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
                    }
                }
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
            }
        }
        out
    }
}

/// Visitor that records the layout without touching any values.
#[derive(Default)]
pub struct LayoutBuilder {
    layout: Layout,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        LayoutBuilder::default()
    }

    pub fn finish(self) -> Layout {
        self.layout
    }
}

impl ParamVisitor for LayoutBuilder {
    type Handle = ();

    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) {
        assert!(rows > 0 && cols > 0, "parameter {name} has a zero dimension");
        self.layout.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            init,
            offset: self.layout.total,
        });
        self.layout.total += rows * cols;
    }
}

/// Visitor that loads flat parameter values onto a tape as leaves, checking
/// each call against the recorded layout.
pub struct Loader<'a, 'b> {
    layout: &'a Layout,
    params: &'a [f64],
    tape: &'b mut Tape,
    next: usize,
    leaves: Vec<Var>,
}

impl<'a, 'b> Loader<'a, 'b> {
    pub fn new(layout: &'a Layout, params: &'a [f64], tape: &'b mut Tape) -> Self {
        assert_eq!(
            params.len(),
            layout.total_len(),
            "parameter vector length does not match layout"
        );
        Loader {
            layout,
            params,
            tape,
            next: 0,
            leaves: Vec::with_capacity(layout.entries.len()),
        }
    }

    /// Leaf variables in layout order, for mapping gradients back to the
    /// flat vector. Call after wiring is complete.
    pub fn finish(self) -> Vec<Var> {
        assert_eq!(
            self.next,
            self.layout.entries.len(),
            "wiring visited {} of {} parameters",
            self.next,
            self.layout.entries.len()
        );
        self.leaves
    }
}

impl ParamVisitor for Loader<'_, '_> {
    type Handle = Var;

    fn param(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> Var {
        let entry = self
            .layout
            .entries
            .get(self.next)
            .unwrap_or_else(|| panic!("wiring produced extra parameter {name}"));
        assert_eq!(entry.name, name, "wiring order drifted from layout");
        assert_eq!(
            (entry.rows, entry.cols),
            (rows, cols),
            "parameter {name} changed shape between layout and load"
        );
        let values = &self.params[entry.offset..entry.offset + entry.len()];
        let matrix = Matrix::from_shape_vec((rows, cols), values.to_vec())
            .expect("entry length matches shape");
        let var = self.tape.leaf(matrix);
        self.next += 1;
        self.leaves.push(var);
        var
    }
}

/// Copies per-leaf gradients into one flat vector aligned with the layout;
/// parameters the loss does not touch get zeros.
pub fn flatten_gradients(
    layout: &Layout,
    leaves: &[Var],
    grads: &Gradients,
) -> Vec<f64> {
    assert_eq!(
        leaves.len(),
        layout.entries.len(),
        "leaf list does not match layout"
    );
    let mut out = vec![0.0; layout.total_len()];
    for (entry, var) in layout.entries.iter().zip(leaves) {
        if let Some(g) = grads.wrt(*var) {
            assert_eq!(g.dim(), (entry.rows, entry.cols));
            out[entry.offset..entry.offset + entry.len()]
                .copy_from_slice(g.as_slice().expect("gradients are contiguous"));
        }
    }
    out
}
