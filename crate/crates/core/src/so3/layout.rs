use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Multichannel spherical feature layout: a list of `(degree, multiplicity)`
/// pairs in ascending degree order, each degree appearing once.
///
/// Memory order of one feature vector is degree-major, then channel, then
/// order `m = -l..=l`, so every `(degree, channel)` slice is a contiguous
/// `2l+1` run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct RepLayout {
    entries: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl RepLayout {
    /// Builds a layout from arbitrary `(degree, multiplicity)` pairs. Pairs
    /// with the same degree are merged (their multiplicities add) and the
    /// result is sorted by degree, so `ρ1⁴ ⊕ ρ0` becomes `[(0, 1), (1, 4)]`.
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (l, c) in pairs {
            if c == 0 {
                return Err(invalid(format!("multiplicity of degree {l} must be positive")));
            }
            match merged.iter_mut().find(|(d, _)| *d == l) {
                Some(e) => e.1 += c,
                None => merged.push((l, c)),
            }
        }
        if merged.is_empty() {
            return Err(invalid("layout must contain at least one degree"));
        }
        merged.sort_unstable_by_key(|e| e.0);
        Ok(Self::from_sorted(merged))
    }

    fn from_sorted(entries: Vec<(usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for &(l, c) in &entries {
            offsets.push(total);
            total += c * (2 * l + 1);
        }
        Self { entries, offsets, total_dim: total }
    }

    /// All degrees `0..=l_max`, `channels` copies each.
    pub fn uniform(l_max: usize, channels: usize) -> Self {
        assert!(channels > 0, "channels must be positive");
        Self::from_sorted((0..=l_max).map(|l| (l, channels)).collect())
    }

    /// `n` invariant scalars.
    pub fn scalars(n: usize) -> Self {
        assert!(n > 0, "scalar count must be positive");
        Self::from_sorted(vec![(0, n)])
    }

    /// The end-effector representation `ρ1⁴ ⊕ ρ0` repeated for each arm.
    pub fn end_effector(arms: usize) -> Self {
        assert!(arms > 0);
        Self::from_sorted(vec![(0, arms), (1, 4 * arms)])
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn max_degree(&self) -> usize {
        self.entries.last().map(|e| e.0).unwrap_or(0)
    }

    pub fn multiplicity(&self, degree: usize) -> usize {
        self.entries.iter().find(|e| e.0 == degree).map(|e| e.1).unwrap_or(0)
    }

    pub fn has_degree(&self, degree: usize) -> bool {
        self.multiplicity(degree) > 0
    }

    /// Offset of the first coefficient of `degree`, if present.
    pub fn degree_offset(&self, degree: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == degree).map(|i| self.offsets[i])
    }

    /// Offset of the `(degree, channel)` slice.
    pub fn slice_offset(&self, degree: usize, channel: usize) -> Option<usize> {
        let i = self.entries.iter().position(|e| e.0 == degree)?;
        (channel < self.entries[i].1).then(|| self.offsets[i] + channel * (2 * degree + 1))
    }

    /// Number of `(degree, channel)` slices.
    pub fn num_slices(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Iterates `(degree, channel, offset)` over every slice in memory order.
    pub fn slices(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.entries.iter().zip(&self.offsets).flat_map(|(&(l, c), &off)| {
            (0..c).map(move |ch| (l, ch, off + ch * (2 * l + 1)))
        })
    }

    /// True when every degree `0..=max_degree` is present with the same multiplicity.
    pub fn uniform_channels(&self) -> Option<usize> {
        let c = self.entries.first()?.1;
        let ok = self.entries.iter().enumerate().all(|(i, &(l, m))| l == i && m == c);
        ok.then_some(c)
    }

    /// Per-degree channel concatenation `self ⊕ other`.
    pub fn concat(&self, other: &RepLayout) -> RepLayout {
        RepLayout::new(self.entries.iter().chain(other.entries.iter()).copied())
            .expect("concatenation of valid layouts is valid")
    }

    /// Index map realising [`RepLayout::concat`] for a list of layouts: entry
    /// `k` of the result gives `(input index, position in that input)`.
    pub fn concat_map(parts: &[&RepLayout]) -> (RepLayout, Vec<(usize, usize)>) {
        let mut pairs = Vec::new();
        for p in parts {
            pairs.extend_from_slice(p.entries());
        }
        let out = RepLayout::new(pairs).expect("concatenation of valid layouts is valid");
        let mut map = Vec::with_capacity(out.total_dim());
        for &(l, _) in out.entries() {
            for (pi, p) in parts.iter().enumerate() {
                if let Some(off) = p.degree_offset(l) {
                    let n = p.multiplicity(l) * (2 * l + 1);
                    map.extend((off..off + n).map(|j| (pi, j)));
                }
            }
        }
        (out, map)
    }
}

impl TryFrom<Vec<(usize, usize)>> for RepLayout {
    type Error = crate::Error;

    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        RepLayout::new(v)
    }
}

impl From<RepLayout> for Vec<(usize, usize)> {
    fn from(l: RepLayout) -> Self {
        l.entries
    }
}

impl std::fmt::Display for RepLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(l, c)| format!("{c}x{l}")).collect();
        write!(f, "[{}]", parts.join("+"))
    }
}

/// Flat coefficient storage conforming to a [`RepLayout`], with optional
/// leading batch/time axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalCoeffs {
    layout: RepLayout,
    lead: Vec<usize>,
    data: Vec<f64>,
}

impl SphericalCoeffs {
    /// A single feature vector.
    pub fn new(layout: RepLayout, data: Vec<f64>) -> Result<Self> {
        Self::with_lead(layout, Vec::new(), data)
    }

    /// A feature tensor with leading axes `lead` (for example `[T]`).
    pub fn with_lead(layout: RepLayout, lead: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let rows: usize = lead.iter().product();
        if data.len() != rows * layout.total_dim() {
            return Err(invalid(format!(
                "coefficient length {} does not match layout {} with leading axes {:?}",
                data.len(),
                layout,
                lead
            )));
        }
        Ok(Self { layout, lead, data })
    }

    pub fn zeros(layout: RepLayout, lead: Vec<usize>) -> Self {
        let n = lead.iter().product::<usize>() * layout.total_dim();
        Self { layout, lead, data: vec![0.0; n] }
    }

    pub fn layout(&self) -> &RepLayout {
        &self.layout
    }

    pub fn lead(&self) -> &[usize] {
        &self.lead
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.lead.iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.layout.total_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.layout.total_dim();
        &mut self.data[r * d..(r + 1) * d]
    }

    /// Shape `lead ++ [total_dim]`.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.push(self.layout.total_dim());
        s
    }

    /// The `(degree, channel)` slice of row `r`, ordered `m = -l..=l`.
    pub fn slice(&self, r: usize, degree: usize, channel: usize) -> Option<&[f64]> {
        let off = self.layout.slice_offset(degree, channel)?;
        Some(&self.row(r)[off..off + 2 * degree + 1])
    }

    pub fn slice_mut(&mut self, r: usize, degree: usize, channel: usize) -> Option<&mut [f64]> {
        let off = self.layout.slice_offset(degree, channel)?;
        Some(&mut self.row_mut(r)[off..off + 2 * degree + 1])
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `max |a - b|`; layouts and shapes must agree.
    pub fn max_abs_diff(&self, other: &SphericalCoeffs) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `‖a − b‖ / max(‖b‖, tiny)`.
    pub fn rel_err(&self, reference: &SphericalCoeffs) -> f64 {
        assert_eq!(self.shape(), reference.shape());
        let num: f64 = self.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum();
        num.sqrt() / reference.norm().max(1e-300)
    }
}
