//! Binary relationship matrices between input and output channels.
//!
//! A relationship matrix `U` has one row per output channel and one column
//! per input channel; `U[o][i] = 1` means input channel `i` contributes to
//! output channel `o`. Learned masks are generated from a short gate vector:
//! each gate selects a 2x2 Kronecker factor that is either all ones (mix) or
//! the identity (separate), and the square product is then duplicated and
//! cropped to the layer's real channel counts.

use std::fmt;

use crate::error::{invalid, Error, Result};

/// Sign binarization: 1 where `x >= 0`, 0 where `x < 0`.
pub fn binarize(tilde_g: &[f64]) -> Result<Vec<u8>> {
    if tilde_g.is_empty() {
        return invalid("gate vector must not be empty");
    }
    Ok(tilde_g.iter().map(|&x| u8::from(x >= 0.0)).collect())
}

/// Continuous gates together with their binarized values.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    tilde: Vec<f64>,
    binary: Vec<u8>,
}

impl GateVector {
    pub fn new(tilde: Vec<f64>) -> Result<Self> {
        let binary = binarize(&tilde)?;
        Ok(Self { tilde, binary })
    }

    /// Gates whose continuous values are `+1` / `-1` for binary `1` / `0`.
    pub fn from_binary(bits: &[u8]) -> Result<Self> {
        check_binary(bits)?;
        Self::new(bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect())
    }

    pub fn tilde(&self) -> &[f64] {
        &self.tilde
    }

    pub fn binary(&self) -> &[u8] {
        &self.binary
    }

    pub fn len(&self) -> usize {
        self.binary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_empty()
    }

    pub fn zeros(&self) -> usize {
        self.binary.iter().filter(|&&b| b == 0).count()
    }
}

fn check_binary(bits: &[u8]) -> Result<()> {
    if bits.is_empty() {
        return invalid("gate vector must not be empty");
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return invalid(format!("gate value {b} is not binary"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeMode {
    Square,
    Expand,
    Reduce,
    Crop,
}

impl fmt::Display for ShapeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeMode::Square => "square",
            ShapeMode::Expand => "expand",
            ShapeMode::Reduce => "reduce",
            ShapeMode::Crop => "crop",
        })
    }
}

/// How a `c_out x c_in` mask is derived from a `2^k x 2^k` gated base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeParams {
    pub k: usize,
    pub r: usize,
    pub mode: ShapeMode,
    pub c_in: usize,
    pub c_out: usize,
}

impl ShapeParams {
    pub fn base_size(&self) -> usize {
        1 << self.k
    }

    /// Maps an entry of the final mask to the base-matrix entry it copies.
    pub fn source(&self, o: usize, i: usize) -> (usize, usize) {
        match self.mode {
            ShapeMode::Square | ShapeMode::Crop => (o, i),
            ShapeMode::Expand => (o / self.r, i),
            ShapeMode::Reduce => (o, i / self.r),
        }
    }
}

fn ceil_log2(n: usize) -> usize {
    debug_assert!(n >= 1);
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Chooses the base size, duplication factor and mode for a `c_in -> c_out`
/// layer.
///
/// Expansion applies when `c_out >= 2 c_in`, reduction when
/// `c_in >= 2 c_out`; everything in between uses a square base that covers
/// both sides and is cropped.
pub fn shape_params(c_in: usize, c_out: usize) -> Result<ShapeParams> {
    if c_in == 0 || c_out == 0 {
        return invalid(format!("channel counts must be positive (c_in={c_in}, c_out={c_out})"));
    }
    let (k, r, mode) = if 2 * c_in <= c_out {
        (ceil_log2(c_in), ceil_div(c_out, c_in), ShapeMode::Expand)
    } else if c_in >= 2 * c_out {
        (ceil_log2(c_out), ceil_div(c_in, c_out), ShapeMode::Reduce)
    } else {
        let k = ceil_log2(c_in.max(c_out));
        let mode = if c_in == c_out && c_in == 1 << k { ShapeMode::Square } else { ShapeMode::Crop };
        (k, 1, mode)
    };
    // A single channel still needs one gate for the 2x2 base.
    Ok(ShapeParams { k: k.max(1), r, mode, c_in, c_out })
}

/// Contiguous channel blocks: output block `j` reads exactly input block `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelPartition {
    input_widths: Vec<usize>,
    output_widths: Vec<usize>,
}

impl ChannelPartition {
    pub fn new(input_widths: Vec<usize>, output_widths: Vec<usize>) -> Result<Self> {
        if input_widths.is_empty() || input_widths.len() != output_widths.len() {
            return invalid(format!(
                "partition needs equal, non-zero group counts (inputs {}, outputs {})",
                input_widths.len(),
                output_widths.len()
            ));
        }
        if input_widths.iter().chain(&output_widths).any(|&w| w == 0) {
            return invalid("partition widths must be at least 1");
        }
        Ok(Self { input_widths, output_widths })
    }

    /// `groups` equal blocks on both sides.
    pub fn even(c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return invalid(format!("{groups} groups do not divide {c_in} -> {c_out} channels"));
        }
        Self::new(vec![c_in / groups; groups], vec![c_out / groups; groups])
    }

    pub fn input_widths(&self) -> &[usize] {
        &self.input_widths
    }

    pub fn output_widths(&self) -> &[usize] {
        &self.output_widths
    }

    pub fn groups(&self) -> usize {
        self.input_widths.len()
    }

    pub fn c_in(&self) -> usize {
        self.input_widths.iter().sum()
    }

    pub fn c_out(&self) -> usize {
        self.output_widths.iter().sum()
    }

    /// Errors unless the partition covers exactly `c_in -> c_out` channels.
    pub fn check_channels(&self, c_in: usize, c_out: usize) -> Result<()> {
        if self.c_in() != c_in || self.c_out() != c_out {
            return invalid(format!(
                "partition covers {} -> {} channels, layer has {c_in} -> {c_out}",
                self.c_in(),
                self.c_out()
            ));
        }
        Ok(())
    }
}

/// Group label of every input and output channel. Generalizes a contiguous
/// partition to layouts such as a channel concatenation of two grouped maps.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelGroups {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl From<&ChannelPartition> for ChannelGroups {
    fn from(p: &ChannelPartition) -> Self {
        let label =
            |widths: &[usize]| widths.iter().enumerate().flat_map(|(g, &w)| std::iter::repeat_n(g, w)).collect();
        Self { input: label(&p.input_widths), output: label(&p.output_widths) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MaskOrigin {
    Gated(ShapeParams),
    FixedGroup(ChannelGroups),
    Fgconv { base: Box<MaskOrigin>, learned: Box<MaskOrigin> },
    Explicit,
}

/// Binary `rows x cols` mask in which every row has at least one 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationshipMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<u8>,
    origin: MaskOrigin,
}

impl RelationshipMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<u8>, origin: MaskOrigin) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return invalid(format!("{} entries do not form a non-empty {rows}x{cols} matrix", entries.len()));
        }
        if entries.iter().any(|&e| e > 1) {
            return invalid("relationship matrix entries must be 0 or 1");
        }
        if let Some(row) = (0..rows).find(|&r| entries[r * cols..(r + 1) * cols].iter().all(|&e| e == 0)) {
            return Err(Error::DegenerateMask { row, rows, cols });
        }
        Ok(Self { rows, cols, entries, origin })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: vec![1; rows * cols], origin: MaskOrigin::Explicit }
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1;
        }
        Self { rows: n, cols: n, entries, origin: MaskOrigin::Explicit }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.entries[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.entries[row * self.cols..(row + 1) * self.cols]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn origin(&self) -> &MaskOrigin {
        &self.origin
    }

    pub fn count_ones(&self) -> usize {
        self.entries.iter().filter(|&&e| e == 1).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.entries.iter().all(|&e| e == 1)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&e| f64::from(e)).collect()
    }

    /// Text form: `"rows cols"` on the first line, then one line of
    /// space-separated digits per row.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<&str> = self.row(r).iter().map(|&e| if e == 1 { "1" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty mask file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad mask header {header:?}"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Format(format!("bad mask header {header:?}")));
        };
        let mut entries = Vec::with_capacity(rows * cols);
        for (r, line) in lines.enumerate() {
            let before = entries.len();
            for tok in line.split_whitespace() {
                match tok {
                    "0" => entries.push(0),
                    "1" => entries.push(1),
                    _ => return Err(Error::Format(format!("mask row {r}: bad digit {tok:?}"))),
                }
            }
            if entries.len() - before != cols {
                return Err(Error::Format(format!(
                    "mask row {r} has {} entries, expected {cols}",
                    entries.len() - before
                )));
            }
        }
        if entries.len() != rows * cols {
            return Err(Error::Format(format!("mask has {} rows, expected {rows}", entries.len() / cols.max(1))));
        }
        Self::new(rows, cols, entries, MaskOrigin::Explicit)
    }
}

fn kron(a: &[u8], an: usize, b: &[u8], bn: usize) -> Vec<u8> {
    let n = an * bn;
    let mut out = vec![0; n * n];
    for ar in 0..an {
        for ac in 0..an {
            let av = a[ar * an + ac];
            if av == 0 {
                continue;
            }
            for br in 0..bn {
                for bc in 0..bn {
                    out[(ar * bn + br) * n + ac * bn + bc] = b[br * bn + bc];
                }
            }
        }
    }
    out
}

/// `U = U_1 (x) ... (x) U_K` with `U_i = g_i 1 + (1 - g_i) I`, `U_1` outermost.
pub fn build_square_u(g: &[u8]) -> Result<RelationshipMatrix> {
    check_binary(g)?;
    let mut acc = vec![1u8];
    let mut n = 1;
    for &gi in g {
        let factor = [1, gi, gi, 1];
        acc = kron(&acc, n, &factor, 2);
        n *= 2;
    }
    let k = g.len();
    let params = ShapeParams { k, r: 1, mode: ShapeMode::Square, c_in: n, c_out: n };
    Ok(RelationshipMatrix { rows: n, cols: n, entries: acc, origin: MaskOrigin::Gated(params) })
}

fn square_base(base: &RelationshipMatrix, r: usize) -> Result<()> {
    if !base.is_square() {
        return invalid(format!("base must be square, got {}x{}", base.rows, base.cols));
    }
    if r < 2 {
        return invalid(format!("duplication factor must be at least 2, got {r}"));
    }
    Ok(())
}

fn with_mode(origin: &MaskOrigin, mode: ShapeMode, r: usize, c_in: usize, c_out: usize) -> MaskOrigin {
    match origin {
        MaskOrigin::Gated(p) => MaskOrigin::Gated(ShapeParams { k: p.k, r, mode, c_in, c_out }),
        other => other.clone(),
    }
}

/// `(I (x) 1_r) base`: every row of the base repeated `r` times.
pub fn expand_u(base: &RelationshipMatrix, r: usize) -> Result<RelationshipMatrix> {
    square_base(base, r)?;
    let n = base.rows;
    let mut entries = Vec::with_capacity(r * n * n);
    for row in 0..n {
        for _ in 0..r {
            entries.extend_from_slice(base.row(row));
        }
    }
    let origin = with_mode(&base.origin, ShapeMode::Expand, r, n, r * n);
    Ok(RelationshipMatrix { rows: r * n, cols: n, entries, origin })
}

/// `base (I (x) 1_r^T)`: every column of the base repeated `r` times.
pub fn reduce_u(base: &RelationshipMatrix, r: usize) -> Result<RelationshipMatrix> {
    square_base(base, r)?;
    let n = base.rows;
    let mut entries = Vec::with_capacity(r * n * n);
    for row in 0..n {
        for &e in base.row(row) {
            entries.extend(std::iter::repeat_n(e, r));
        }
    }
    let origin = with_mode(&base.origin, ShapeMode::Reduce, r, r * n, n);
    Ok(RelationshipMatrix { rows: n, cols: r * n, entries, origin })
}

/// Top-left `c_out x c_in` block.
pub fn crop_u(u: &RelationshipMatrix, c_out: usize, c_in: usize) -> Result<RelationshipMatrix> {
    if c_out == 0 || c_in == 0 || c_out > u.rows || c_in > u.cols {
        return invalid(format!("cannot crop {}x{} mask to {c_out}x{c_in}", u.rows, u.cols));
    }
    let entries = (0..c_out).flat_map(|r| u.row(r)[..c_in].iter().copied()).collect();
    let origin = match &u.origin {
        MaskOrigin::Gated(p) => MaskOrigin::Gated(ShapeParams { c_in, c_out, ..*p }),
        other => other.clone(),
    };
    RelationshipMatrix::new(c_out, c_in, entries, origin)
}

/// Full construction of a gated `c_out x c_in` mask.
pub fn assemble_u(g: &GateVector, c_in: usize, c_out: usize) -> Result<RelationshipMatrix> {
    let params = shape_params(c_in, c_out)?;
    if g.len() != params.k {
        return invalid(format!("{} gates given, a {c_in} -> {c_out} layer needs {}", g.len(), params.k));
    }
    let base = build_square_u(g.binary())?;
    let shaped = match params.mode {
        ShapeMode::Square => base,
        ShapeMode::Expand => expand_u(&base, params.r)?,
        ShapeMode::Reduce => reduce_u(&base, params.r)?,
        ShapeMode::Crop => base,
    };
    let mut u = crop_u(&shaped, c_out, c_in)?;
    u.origin = MaskOrigin::Gated(params);
    Ok(u)
}

/// Block-diagonal mask from a contiguous channel partition.
pub fn fixed_group_u(p: &ChannelPartition) -> Result<RelationshipMatrix> {
    grouped_u(ChannelGroups::from(p))
}

/// Mask connecting channels that carry the same group label.
pub fn grouped_u(groups: ChannelGroups) -> Result<RelationshipMatrix> {
    let (rows, cols) = (groups.output.len(), groups.input.len());
    let entries = groups.output.iter().flat_map(|&go| groups.input.iter().map(move |&gi| u8::from(go == gi))).collect();
    RelationshipMatrix::new(rows, cols, entries, MaskOrigin::FixedGroup(groups))
}

/// Fixed mask of a depthwise layer: identity, or identity with each channel
/// duplicated (`c_out = r c_in`) or summed over (`c_in = r c_out`).
pub fn depthwise_u(c_in: usize, c_out: usize) -> Result<RelationshipMatrix> {
    if c_in == c_out {
        fixed_group_u(&ChannelPartition::new(vec![1; c_in], vec![1; c_out])?)
    } else if c_out.is_multiple_of(c_in) {
        fixed_group_u(&ChannelPartition::new(vec![1; c_in], vec![c_out / c_in; c_in])?)
    } else if c_in.is_multiple_of(c_out) {
        fixed_group_u(&ChannelPartition::new(vec![c_in / c_out; c_out], vec![1; c_out])?)
    } else {
        invalid(format!("depthwise convolution needs one channel count to divide the other ({c_in} -> {c_out})"))
    }
}

/// `U_F = U_0 (.) U`.
pub fn fgconv_u(u0: &RelationshipMatrix, u: &RelationshipMatrix) -> Result<RelationshipMatrix> {
    if u0.rows != u.rows || u0.cols != u.cols {
        return invalid(format!("mask shapes differ: {}x{} vs {}x{}", u0.rows, u0.cols, u.rows, u.cols));
    }
    let entries = u0.entries.iter().zip(&u.entries).map(|(a, b)| a & b).collect();
    let origin = MaskOrigin::Fgconv { base: Box::new(u0.origin.clone()), learned: Box::new(u.origin.clone()) };
    RelationshipMatrix::new(u.rows, u.cols, entries, origin)
}

/// Connected components of the bipartite row/column graph.
pub fn count_groups(u: &RelationshipMatrix) -> usize {
    let n = u.rows + u.cols;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for r in 0..u.rows {
        for c in 0..u.cols {
            if u.get(r, c) == 1 {
                let (a, b) = (find(&mut parent, r), find(&mut parent, u.rows + c));
                if a != b {
                    parent[a] = b;
                    components -= 1;
                }
            }
        }
    }
    components
}

/// Fraction of zero entries.
pub fn sparsity(u: &RelationshipMatrix) -> f64 {
    let total = u.entries.len();
    (total - u.count_ones()) as f64 / total as f64
}
