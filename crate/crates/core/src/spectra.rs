// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral bases of the embedding and unembedding matrices, band
//! partitions over their right singular vectors, and the filter families
//! built from them.
//!
//! Bands are numbered from 1 (largest singular values) to `n_bands` (the
//! dark end of the spectrum). Filters act on column vectors: a filter `F`
//! maps `v` to `F v`. Every family except `Psi` is a symmetric projector,
//! so the orientation only matters for `Psi`.
//!
//! Canonical filter strings:
//!
//! | string            | meaning                                        |
//! |-------------------|------------------------------------------------|
//! | `phi_u:1..14`     | projector onto unembedding bands 1..=14        |
//! | `phi_e:3..20`     | projector onto embedding bands 3..=20          |
//! | `phi_u:0`         | the zero projector (no band kept)              |
//! | `psi:14`          | `I - Phi_e(15..n) Phi_u(15..n)`                |
//! | `omega_u:14`      | projector onto bands 1..=14 plus band `n`      |
//! | `rnd:14:seed=7`   | projector onto a seeded random subspace        |
//! | `id`              | identity                                       |

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Result, SpectroError};
use crate::linalg::{self, norm, Matrix, SvdResult};

/// Default number of spectral bands.
pub const DEFAULT_BANDS: usize = 20;

/// Which parameter matrix a basis was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisLabel {
    Embedding,
    Unembedding,
}

impl BasisLabel {
    pub fn short(self) -> &'static str {
        match self {
            Self::Embedding => "e",
            Self::Unembedding => "u",
        }
    }
}

/// SVD of a `|V| x d` embedding or unembedding matrix.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    label: BasisLabel,
    svd: SvdResult,
    d: usize,
}

impl SpectralBasis {
    pub fn label(&self) -> BasisLabel {
        self.label
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Singular values, largest first.
    pub fn sigma(&self) -> &[f64] {
        &self.svd.sigma
    }

    /// Right singular vectors as the columns of a `d x d` matrix.
    pub fn rsv(&self) -> &Matrix {
        &self.svd.v
    }

    pub fn svd(&self) -> &SvdResult {
        &self.svd
    }
}

/// Decomposes `w` (`|V| x d`, `|V| >= d`).
pub fn compute_spectral_basis(w: &Matrix, label: BasisLabel) -> Result<SpectralBasis> {
    let (vocab, d) = w.shape();
    if vocab < d {
        return Err(SpectroError::Shape(format!("{label:?} matrix is {vocab}x{d}; spectral analysis needs |V| >= d")));
    }
    let svd = linalg::svd(w)?;
    debug_assert_eq!(svd.v.shape(), (d, d));
    Ok(SpectralBasis { label, svd, d })
}

/// Contiguous bands over `[0, d)`: each band has `d / n_bands` columns and
/// the remainder goes to the last band.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandPartition {
    n_bands: usize,
    d: usize,
    ranges: Vec<Range<usize>>,
}

impl BandPartition {
    pub fn new(d: usize, n_bands: usize) -> Result<Self> {
        if n_bands == 0 || n_bands > d {
            return Err(SpectroError::InvalidArgument(format!("cannot split {d} dimensions into {n_bands} bands")));
        }
        let width = d / n_bands;
        let ranges = (0..n_bands)
            .map(|b| {
                let start = b * width;
                let end = if b + 1 == n_bands { d } else { start + width };
                start..end
            })
            .collect();
        Ok(Self { n_bands, d, ranges })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Column range of band `b` (1-based).
    pub fn band(&self, b: usize) -> Result<Range<usize>> {
        self.check(b, b)?;
        Ok(self.ranges[b - 1].clone())
    }

    /// Columns of bands `j..=k`.
    pub fn span(&self, j: usize, k: usize) -> Result<Range<usize>> {
        self.check(j, k)?;
        Ok(self.ranges[j - 1].start..self.ranges[k - 1].end)
    }

    /// Number of columns in bands `1..=k`; zero for `k = 0`.
    pub fn prefix_len(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.ranges[k.min(self.n_bands) - 1].end
        }
    }

    fn check(&self, j: usize, k: usize) -> Result<()> {
        if j == 0 || j > k || k > self.n_bands {
            return Err(SpectroError::InvalidArgument(format!("band range {j}..{k} outside 1..{}", self.n_bands)));
        }
        Ok(())
    }
}

/// Right singular vectors of bands `j..=k`, concatenated as columns.
pub fn band_columns(basis: &SpectralBasis, partition: &BandPartition, j: usize, k: usize) -> Result<Matrix> {
    if partition.d() != basis.d() {
        return Err(SpectroError::Shape(format!("partition over {} dims, basis has {}", partition.d(), basis.d())));
    }
    Ok(basis.rsv().columns(partition.span(j, k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterFamily {
    PhiU,
    PhiE,
    Psi,
    OmegaU,
    Random,
    Identity,
}

impl FilterFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::PhiU => "phi_u",
            Self::PhiE => "phi_e",
            Self::Psi => "psi",
            Self::OmegaU => "omega_u",
            Self::Random => "rnd",
            Self::Identity => "id",
        }
    }
}

impl FromStr for FilterFamily {
    type Err = SpectroError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "phi_u" => Self::PhiU,
            "phi_e" => Self::PhiE,
            "psi" => Self::Psi,
            "omega_u" => Self::OmegaU,
            "rnd" => Self::Random,
            "id" => Self::Identity,
            _ => return Err(SpectroError::parse("filter family", s, "unknown family")),
        })
    }
}

impl fmt::Display for FilterFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative description of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FilterSpec {
    pub family: FilterFamily,
    /// First band (Phi families only; 1 otherwise).
    pub j: usize,
    /// Last band, or the `k` index of Psi/Omega/Random.
    pub k: usize,
    /// Seed of the random basis (Random only).
    pub seed: u64,
    pub n_bands: usize,
}

impl FilterSpec {
    pub fn phi_u(j: usize, k: usize, n_bands: usize) -> Self {
        Self::with(FilterFamily::PhiU, j, k, 0, n_bands)
    }

    pub fn phi_e(j: usize, k: usize, n_bands: usize) -> Self {
        Self::with(FilterFamily::PhiE, j, k, 0, n_bands)
    }

    pub fn psi(k: usize, n_bands: usize) -> Self {
        Self::with(FilterFamily::Psi, 1, k, 0, n_bands)
    }

    pub fn omega_u(k: usize, n_bands: usize) -> Self {
        Self::with(FilterFamily::OmegaU, 1, k, 0, n_bands)
    }

    pub fn random(k: usize, seed: u64, n_bands: usize) -> Self {
        Self::with(FilterFamily::Random, 1, k, seed, n_bands)
    }

    pub fn identity(n_bands: usize) -> Self {
        Self::with(FilterFamily::Identity, 1, n_bands, 0, n_bands)
    }

    /// The U-dark projector `Phi_u(n..n)`.
    pub fn u_dark(n_bands: usize) -> Self {
        Self::phi_u(n_bands, n_bands, n_bands)
    }

    /// A family at sweep index `k`: Phi families keep bands `1..=k`.
    pub fn of_family(family: FilterFamily, k: usize, seed: u64, n_bands: usize) -> Self {
        match family {
            FilterFamily::PhiU => Self::phi_u(1, k, n_bands),
            FilterFamily::PhiE => Self::phi_e(1, k, n_bands),
            FilterFamily::Psi => Self::psi(k, n_bands),
            FilterFamily::OmegaU => Self::omega_u(k, n_bands),
            FilterFamily::Random => Self::random(k, seed, n_bands),
            FilterFamily::Identity => Self::identity(n_bands),
        }
    }

    fn with(family: FilterFamily, j: usize, k: usize, seed: u64, n_bands: usize) -> Self {
        Self { family, j, k, seed, n_bands }
    }

    /// Parses a canonical filter string for a partition of `n_bands` bands.
    pub fn parse(s: &str, n_bands: usize) -> Result<Self> {
        let err = |reason: &str| SpectroError::parse("filter", s, reason);
        let s_trim = s.trim();
        let (family, rest) = match s_trim.split_once(':') {
            Some((f, r)) => (f, Some(r)),
            None => (s_trim, None),
        };
        let family: FilterFamily = family.parse().map_err(|_| err("unknown family"))?;
        let int = |t: &str| t.trim().parse::<usize>().map_err(|_| err("expected an integer"));

        let spec = match family {
            FilterFamily::Identity => {
                if rest.is_some() {
                    return Err(err("`id` takes no arguments"));
                }
                Self::identity(n_bands)
            }
            FilterFamily::PhiU | FilterFamily::PhiE => {
                let rest = rest.ok_or_else(|| err("missing band range"))?;
                let (j, k) = match rest.split_once("..") {
                    Some((j, k)) => (int(j)?, int(k)?),
                    None => (1, int(rest)?),
                };
                Self::with(family, j, k, 0, n_bands)
            }
            FilterFamily::Psi | FilterFamily::OmegaU => {
                let k = int(rest.ok_or_else(|| err("missing band index"))?)?;
                Self::with(family, 1, k, 0, n_bands)
            }
            FilterFamily::Random => {
                let rest = rest.ok_or_else(|| err("missing band index"))?;
                let (k, seed) = match rest.split_once(':') {
                    Some((k, seed)) => {
                        let seed = seed.strip_prefix("seed=").ok_or_else(|| err("expected `seed=<n>`"))?;
                        let seed = seed.parse::<u64>().map_err(|_| err("bad seed"))?;
                        (int(k)?, seed)
                    }
                    None => (int(rest)?, 0),
                };
                Self::with(family, 1, k, seed, n_bands)
            }
        };
        spec.validate().map_err(|e| match e {
            SpectroError::InvalidArgument(reason) => err(&reason),
            other => other,
        })?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_bands;
        let bad = |why: String| Err(SpectroError::InvalidArgument(why));
        if n == 0 {
            return bad("n_bands must be positive".into());
        }
        match self.family {
            FilterFamily::PhiU | FilterFamily::PhiE => {
                let empty = self.j == 1 && self.k == 0;
                if !empty && (self.j == 0 || self.j > self.k || self.k > n) {
                    return bad(format!("band range {}..{} outside 1..{n}", self.j, self.k));
                }
            }
            FilterFamily::Psi | FilterFamily::OmegaU | FilterFamily::Random => {
                if self.k == 0 || self.k > n {
                    return bad(format!("k = {} outside 1..{n}", self.k));
                }
            }
            FilterFamily::Identity => {}
        }
        Ok(())
    }

    /// Number of dimensions (singular vectors) this filter keeps.
    pub fn kept_dims(&self, partition: &BandPartition) -> usize {
        let n = partition.n_bands();
        match self.family {
            FilterFamily::Identity => partition.d(),
            FilterFamily::PhiU | FilterFamily::PhiE => {
                if self.k == 0 {
                    0
                } else {
                    partition.prefix_len(self.k) - partition.prefix_len(self.j - 1)
                }
            }
            FilterFamily::Psi | FilterFamily::Random => partition.prefix_len(self.k),
            FilterFamily::OmegaU => {
                if self.k >= n - 1 {
                    partition.d()
                } else {
                    partition.prefix_len(self.k) + partition.ranges()[n - 1].len()
                }
            }
        }
    }

    pub fn kept_fraction(&self, partition: &BandPartition) -> f64 {
        self.kept_dims(partition) as f64 / partition.d() as f64
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            FilterFamily::Identity => f.write_str("id"),
            FilterFamily::PhiU | FilterFamily::PhiE if self.k == 0 => {
                write!(f, "{}:0", self.family)
            }
            FilterFamily::PhiU | FilterFamily::PhiE => {
                write!(f, "{}:{}..{}", self.family, self.j, self.k)
            }
            FilterFamily::Psi | FilterFamily::OmegaU => write!(f, "{}:{}", self.family, self.k),
            FilterFamily::Random => write!(f, "rnd:{}:seed={}", self.k, self.seed),
        }
    }
}

#[derive(Debug, Clone)]
enum FilterMap {
    Identity,
    /// `V V^T` for orthonormal columns `V` (`d x m`, `m` may be zero).
    Projector(Matrix),
    /// `I - (E E^T)(U U^T)` with `E`, `U` the embedding and unembedding tails.
    DoubleDarkComplement {
        e_tail: Matrix,
        u_tail: Matrix,
    },
}

/// A `d x d` linear map realizing one [`FilterSpec`], stored in factored form.
#[derive(Debug, Clone)]
pub struct LinearFilter {
    spec: FilterSpec,
    d: usize,
    map: FilterMap,
}

fn project(cols: &Matrix, v: &[f64]) -> Vec<f64> {
    // cols^T v, then cols * coeffs
    let m = cols.cols();
    let mut coeffs = vec![0.0; m];
    for (i, &vi) in v.iter().enumerate() {
        for (c, &x) in coeffs.iter_mut().zip(cols.row(i)) {
            *c += x * vi;
        }
    }
    (0..cols.rows()).map(|i| linalg::dot(cols.row(i), &coeffs)).collect()
}

impl LinearFilter {
    /// The identity map for dimension `d`, not tied to any basis.
    pub fn identity(d: usize, n_bands: usize) -> Self {
        Self { spec: FilterSpec::identity(n_bands), d, map: FilterMap::Identity }
    }

    /// Projector onto the span of the given orthonormal columns.
    pub fn from_orthonormal_columns(spec: FilterSpec, cols: Matrix) -> Self {
        Self { spec, d: cols.rows(), map: FilterMap::Projector(cols) }
    }

    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.map, FilterMap::Identity)
    }

    /// `F v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        Ok(self.apply_unchecked(v))
    }

    pub(crate) fn apply_unchecked(&self, v: &[f64]) -> Vec<f64> {
        match &self.map {
            FilterMap::Identity => v.to_vec(),
            FilterMap::Projector(cols) => project(cols, v),
            FilterMap::DoubleDarkComplement { e_tail, u_tail } => {
                let inner = project(u_tail, v);
                let outer = project(e_tail, &inner);
                v.iter().zip(outer).map(|(a, b)| a - b).collect()
            }
        }
    }

    /// `(I - F) v`: the component the filter removes.
    pub fn shaving(&self, v: &[f64]) -> Result<Vec<f64>> {
        let kept = self.apply(v)?;
        Ok(v.iter().zip(kept).map(|(a, b)| a - b).collect())
    }

    /// Dense `d x d` matrix of the map.
    pub fn materialize(&self) -> Matrix {
        let d = self.d;
        let mut columns = Vec::with_capacity(d);
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            columns.push(self.apply_unchecked(&e));
        }
        Matrix::from_columns(&columns).expect("square")
    }

    /// Rank of a projector family (number of kept orthonormal directions).
    pub fn projector_rank(&self) -> Option<usize> {
        match &self.map {
            FilterMap::Identity => Some(self.d),
            FilterMap::Projector(cols) => Some(cols.cols()),
            FilterMap::DoubleDarkComplement { .. } => None,
        }
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.d {
            return Err(SpectroError::Shape(format!(
                "filter over {} dims applied to a vector of length {}",
                self.d,
                v.len()
            )));
        }
        Ok(())
    }
}

/// Builds the filter described by `spec`. `basis_e` is required for the
/// `PhiE` and `Psi` families.
pub fn make_filter(
    spec: &FilterSpec,
    basis_u: &SpectralBasis,
    basis_e: Option<&SpectralBasis>,
) -> Result<LinearFilter> {
    spec.validate()?;
    let d = basis_u.d();
    if let Some(e) = basis_e {
        if e.d() != d {
            return Err(SpectroError::Shape(format!("embedding basis has d = {}, unembedding basis d = {d}", e.d())));
        }
    }
    let partition = BandPartition::new(d, spec.n_bands)?;
    let n = spec.n_bands;
    let need_e = || {
        basis_e
            .ok_or_else(|| SpectroError::InvalidArgument(format!("{} filters need the embedding basis", spec.family)))
    };
    let projector = |cols: Matrix| Ok(LinearFilter::from_orthonormal_columns(*spec, cols));

    match spec.family {
        FilterFamily::Identity => Ok(LinearFilter { spec: *spec, d, map: FilterMap::Identity }),
        FilterFamily::PhiU | FilterFamily::PhiE => {
            let basis = if spec.family == FilterFamily::PhiU { basis_u } else { need_e()? };
            if spec.k == 0 {
                return projector(Matrix::zeros(d, 0));
            }
            projector(band_columns(basis, &partition, spec.j, spec.k)?)
        }
        FilterFamily::Psi => {
            let basis_e = need_e()?;
            if spec.k == n {
                return Ok(LinearFilter { spec: *spec, d, map: FilterMap::Identity });
            }
            Ok(LinearFilter {
                spec: *spec,
                d,
                map: FilterMap::DoubleDarkComplement {
                    e_tail: band_columns(basis_e, &partition, spec.k + 1, n)?,
                    u_tail: band_columns(basis_u, &partition, spec.k + 1, n)?,
                },
            })
        }
        FilterFamily::OmegaU => {
            let head = partition.span(1, spec.k)?;
            let tail = partition.band(n)?;
            let mut indices: Vec<usize> = head.clone().collect();
            indices.extend(tail.filter(|i| !head.contains(i)));
            projector(basis_u.rsv().select_columns(&indices))
        }
        FilterFamily::Random => {
            let m = partition.prefix_len(spec.k);
            projector(linalg::random_orthonormal(d, m, spec.seed)?)
        }
    }
}

/// `filter · v`.
pub fn apply_filter(filter: &LinearFilter, v: &[f64]) -> Result<Vec<f64>> {
    filter.apply(v)
}

/// Whether a parameter matrix reads from the residual stream (`d` rows,
/// e.g. `W_q`, `W_1`) or writes into it (`d` columns, e.g. `W_o`, `W_2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

/// Norm of the projection of `w` onto each right singular vector of the
/// basis: entry `i` is `||v_i^T W||` (read) or `||v_i^T W^T||` (write).
pub fn param_projection_profile(basis: &SpectralBasis, w: &Matrix, direction: Direction) -> Result<Vec<f64>> {
    let d = basis.d();
    let oriented = match direction {
        Direction::Read => {
            if w.rows() != d {
                return Err(SpectroError::Shape(format!("read matrix must have {d} rows, has {}", w.rows())));
            }
            w.clone()
        }
        Direction::Write => {
            if w.cols() != d {
                return Err(SpectroError::Shape(format!("write matrix must have {d} columns, has {}", w.cols())));
            }
            w.transpose()
        }
    };
    let projected = basis.rsv().transpose().matmul(&oriented)?;
    Ok((0..d).map(|i| norm(projected.row(i))).collect())
}

/// Both bases of a model plus the band partition shared by every filter.
#[derive(Debug, Clone)]
pub struct Spectra {
    pub unembedding: SpectralBasis,
    pub embedding: SpectralBasis,
    pub partition: BandPartition,
}

impl Spectra {
    pub fn new(embed: &Matrix, unembed: &Matrix, n_bands: usize) -> Result<Self> {
        let unembedding = compute_spectral_basis(unembed, BasisLabel::Unembedding)?;
        let embedding = compute_spectral_basis(embed, BasisLabel::Embedding)?;
        if embedding.d() != unembedding.d() {
            return Err(SpectroError::Shape("embedding and unembedding disagree on d".into()));
        }
        let partition = BandPartition::new(unembedding.d(), n_bands)?;
        Ok(Self { unembedding, embedding, partition })
    }

    pub fn n_bands(&self) -> usize {
        self.partition.n_bands()
    }

    pub fn basis(&self, label: BasisLabel) -> &SpectralBasis {
        match label {
            BasisLabel::Embedding => &self.embedding,
            BasisLabel::Unembedding => &self.unembedding,
        }
    }

    pub fn filter(&self, spec: &FilterSpec) -> Result<LinearFilter> {
        if spec.n_bands != self.n_bands() {
            return Err(SpectroError::InvalidArgument(format!(
                "filter `{spec}` assumes {} bands, spectra use {}",
                spec.n_bands,
                self.n_bands()
            )));
        }
        make_filter(spec, &self.unembedding, Some(&self.embedding))
    }

    /// Parses and builds a canonical filter string.
    pub fn parse_filter(&self, s: &str) -> Result<LinearFilter> {
        self.filter(&FilterSpec::parse(s, self.n_bands())?)
    }

    /// `Phi_u(n..n)`, the U-dark projector.
    pub fn u_dark(&self) -> LinearFilter {
        self.filter(&FilterSpec::u_dark(self.n_bands())).expect("last band always exists")
    }
}
