//! Site configurations: Bernoulli product fields and heat-bath Markov fields.
//!
//! All randomness comes from ChaCha8 streams addressed by
//! `(master_seed, replica_index)`: the master seed keys the cipher and the
//! replica index selects the 64-bit stream id, so replicas never share
//! keystream and any replica can be regenerated without replaying others.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::BoxGeometry;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Address of a replica's random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replica_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replica_index: u64) -> Self {
        SeedSpec {
            master_seed,
            replica_index,
        }
    }

    /// Stream for this replica.
    pub fn stream(&self) -> Stream {
        derive_stream(*self)
    }
}

/// Deterministic non-overlapping stream for `seed`.
pub fn derive_stream(seed: SeedSpec) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.master_seed);
    rng.set_stream(seed.replica_index);
    rng
}

/// Derives an independent master seed for a named sub-experiment.
pub fn child_seed(master_seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer on the combination.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master_seed ^ splitmix64(h))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Comparison threshold turning a uniform 64-bit draw into a Bernoulli(p)
/// occupation. Monotone in `p`: for `p1 <= p2` every draw occupied under `p1`
/// is occupied under `p2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold(Option<u64>);

impl Threshold {
    pub fn new(p: f64) -> Self {
        if p >= 1.0 {
            Threshold(None)
        } else if p <= 0.0 {
            Threshold(Some(0))
        } else {
            // 2^64 * p, rounded down; exact for dyadic p.
            Threshold(Some((p * 18_446_744_073_709_551_616.0) as u64))
        }
    }

    #[inline]
    pub fn accepts(self, draw: u64) -> bool {
        match self.0 {
            None => true,
            Some(t) => draw < t,
        }
    }
}

/// One realization of the occupation field on a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteConfig {
    geometry: BoxGeometry,
    occupied: Vec<bool>,
}

impl SiteConfig {
    pub fn new(geometry: BoxGeometry, occupied: Vec<bool>) -> Result<Self> {
        if occupied.len() != geometry.site_count() {
            return Err(Error::param(
                "occupied",
                format!(
                    "{} bits for a box of {} sites",
                    occupied.len(),
                    geometry.site_count()
                ),
            ));
        }
        Ok(SiteConfig { geometry, occupied })
    }

    pub fn vacant(geometry: BoxGeometry) -> Self {
        let n = geometry.site_count();
        SiteConfig {
            geometry,
            occupied: vec![false; n],
        }
    }

    /// Configuration whose occupied sites are exactly `sites`.
    pub fn from_sites<'a, I>(geometry: BoxGeometry, sites: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a crate::lattice::SiteIndex>,
    {
        let mut cfg = SiteConfig::vacant(geometry);
        for s in sites {
            let i = cfg
                .geometry
                .index_of(s)
                .ok_or_else(|| Error::param("sites", format!("{s} lies outside the box")))?;
            cfg.occupied[i] = true;
        }
        Ok(cfg)
    }

    pub fn geometry(&self) -> &BoxGeometry {
        &self.geometry
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    pub fn is_occupied(&self, index: usize) -> bool {
        self.occupied[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.occupied[index] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&b| b).count()
    }

    /// Restriction to a concentric box of radius `radius`, re-tagged with `bc`.
    pub fn restrict(&self, radius: usize, bc: crate::lattice::Boundary) -> Result<SiteConfig> {
        if radius > self.geometry.radius() {
            return Err(Error::param(
                "radius",
                format!(
                    "restriction radius {radius} exceeds ambient radius {}",
                    self.geometry.radius()
                ),
            ));
        }
        let inner = BoxGeometry::new(self.geometry.dim(), radius, bc)?;
        let occupied = (0..inner.site_count())
            .map(|i| self.occupied[self.geometry.embed_from(&inner, i)])
            .collect();
        Ok(SiteConfig {
            geometry: inner,
            occupied,
        })
    }

    /// Same occupation bits under a different boundary tag.
    pub fn with_bc(&self, bc: crate::lattice::Boundary) -> SiteConfig {
        SiteConfig {
            geometry: self.geometry.with_bc(bc),
            occupied: self.occupied.clone(),
        }
    }
}

/// I.i.d. occupation with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliSpec {
    pub p: f64,
}

impl BernoulliSpec {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param("p", format!("{p} is not a probability")));
        }
        Ok(BernoulliSpec { p })
    }
}

/// Single-site heat-bath field with conditionals indexed by the number of
/// occupied neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovFieldSpec {
    /// Occupation probability given `k` occupied neighbors, `k = 0..=2d`.
    pub conditional: Vec<f64>,
    /// Finite-energy floor.
    pub delta: f64,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    /// Holley domination bound, when declared.
    pub dominating_p: Option<f64>,
}

pub const DEFAULT_SWEEPS: usize = 64;

fn default_sweeps() -> usize {
    DEFAULT_SWEEPS
}

impl MarkovFieldSpec {
    /// Checks the finite-energy floor, the table length for `dim`, and the
    /// declared domination bound.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.conditional.len() != 2 * dim + 1 {
            return Err(Error::param(
                "conditional_table",
                format!(
                    "expected {} entries for dimension {dim}, got {}",
                    2 * dim + 1,
                    self.conditional.len()
                ),
            ));
        }
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return Err(Error::param("delta", format!("{} not in (0, 1/2]", self.delta)));
        }
        if self.sweeps == 0 {
            return Err(Error::param("sweeps", "must be positive"));
        }
        for (k, &q) in self.conditional.iter().enumerate() {
            if q < self.delta || q > 1.0 - self.delta {
                return Err(Error::param(
                    "conditional_table",
                    format!(
                        "entry {k} = {q} violates the finite-energy floor delta = {}",
                        self.delta
                    ),
                ));
            }
            if let Some(dom) = self.dominating_p {
                if q > dom {
                    return Err(Error::param(
                        "dominating_p",
                        format!("entry {k} = {q} exceeds the dominating probability {dom}"),
                    ));
                }
            }
        }
        if let Some(dom) = self.dominating_p {
            if !(0.0..=1.0).contains(&dom) {
                return Err(Error::param("dominating_p", format!("{dom} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Occupation model of a replica experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Model {
    Bernoulli(BernoulliSpec),
    Markov(MarkovFieldSpec),
}

impl Model {
    pub fn bernoulli(p: f64) -> Result<Self> {
        Ok(Model::Bernoulli(BernoulliSpec::new(p)?))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Model::Bernoulli(b) => BernoulliSpec::new(b.p).map(|_| ()),
            Model::Markov(m) => m.validate(dim),
        }
    }

    pub fn sample(&self, g: &BoxGeometry, seed: SeedSpec) -> Result<SiteConfig> {
        match self {
            Model::Bernoulli(b) => Ok(sample_bernoulli(g, *b, seed)),
            Model::Markov(m) => sample_markov_field(g, m, seed),
        }
    }

    /// Occupation probability of the Bernoulli model, or the declared
    /// dominating probability of a Markov field.
    pub fn p(&self) -> Option<f64> {
        match self {
            Model::Bernoulli(b) => Some(b.p),
            Model::Markov(m) => m.dominating_p,
        }
    }
}

/// Samples each site independently with probability `spec.p`, drawing one
/// 64-bit word per site in linear-index order.
pub fn sample_bernoulli(g: &BoxGeometry, spec: BernoulliSpec, seed: SeedSpec) -> SiteConfig {
    let mut rng = seed.stream();
    sample_bernoulli_with(g, spec.p, &mut rng)
}

pub(crate) fn sample_bernoulli_with(g: &BoxGeometry, p: f64, rng: &mut impl RngCore) -> SiteConfig {
    let t = Threshold::new(p);
    let occupied = (0..g.site_count()).map(|_| t.accepts(rng.next_u64())).collect();
    SiteConfig {
        geometry: g.clone(),
        occupied,
    }
}

/// Heat-bath sampler: `spec.sweeps` systematic sweeps in linear-index order
/// starting from the all-vacant configuration. Sites outside the box are
/// vacant (periodic geometries wrap instead).
///
/// The final sweep consumes the same words of the replica stream as
/// [`sample_bernoulli`], so a field dominated by `dominating_p` is sitewise
/// below the Bernoulli(`dominating_p`) field drawn from the same seed.
pub fn sample_markov_field(
    g: &BoxGeometry,
    spec: &MarkovFieldSpec,
    seed: SeedSpec,
) -> Result<SiteConfig> {
    spec.validate(g.dim())?;
    let thresholds: Vec<Threshold> = spec.conditional.iter().map(|&q| Threshold::new(q)).collect();
    let n = g.site_count();
    let mut occupied = vec![false; n];
    let mut rng = seed.stream();
    for sweep in 0..spec.sweeps {
        // Two 32-bit words per draw; the last sweep starts at word 0.
        let block = (spec.sweeps - 1 - sweep) as u128;
        rng.set_word_pos(block * 2 * n as u128);
        for i in 0..n {
            let mut k = 0usize;
            g.for_each_neighbor(i, |j| {
                if occupied[j] {
                    k += 1;
                }
            });
            occupied[i] = thresholds[k].accepts(rng.next_u64());
        }
    }
    Ok(SiteConfig {
        geometry: g.clone(),
        occupied,
    })
}
