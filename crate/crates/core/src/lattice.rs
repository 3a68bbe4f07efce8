//! Box geometry `B_n = [-n, n]^d ∩ Z^d` and its nearest-neighbor topology.
//!
//! Sites are stored row-major with the first coordinate most significant, so
//! the linear index order coincides with the lexicographic order on
//! coordinate vectors. The lexicographic minimum of any set of sites is
//! therefore the site with the smallest linear index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible number of sites in a box.
pub const MAX_SITES: u64 = 1 << 48;

/// Boundary condition attached to a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Exterior treated as vacant.
    Zero,
    /// Clusters may extend beyond the box; realized on an enlarged ambient box.
    Free,
    /// Torus with vertex set `B_n`.
    Periodic,
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::Zero => "zero",
            Boundary::Free => "free",
            Boundary::Periodic => "periodic",
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Boundary::Zero),
            "free" => Ok(Boundary::Free),
            "periodic" => Ok(Boundary::Periodic),
            other => Err(Error::Geometry(format!("unknown boundary condition `{other}`"))),
        }
    }
}

/// A site of `Z^d` given by its coordinates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteIndex(pub Vec<i64>);

impl SiteIndex {
    pub fn origin(dim: usize) -> Self {
        SiteIndex(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Sup-norm distance to the origin.
    pub fn sup_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }
}

impl From<Vec<i64>> for SiteIndex {
    fn from(v: Vec<i64>) -> Self {
        SiteIndex(v)
    }
}

impl fmt::Display for SiteIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str(")")
    }
}

/// The cube `B_n` in dimension `d` together with a boundary condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoxGeometry {
    dim: usize,
    radius: usize,
    bc: Boundary,
    strides: Vec<usize>,
}

impl BoxGeometry {
    pub fn new(dim: usize, radius: usize, bc: Boundary) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Geometry("dimension must be at least 1".into()));
        }
        let sites = checked_volume(dim, radius)?;
        let width = 2 * radius + 1;
        let mut strides = vec![1usize; dim];
        for k in (0..dim.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * width;
        }
        debug_assert_eq!(strides[0] * width, sites);
        Ok(BoxGeometry {
            dim,
            radius,
            bc,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn bc(&self) -> Boundary {
        self.bc
    }

    /// Side length `2n + 1`.
    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn site_count(&self) -> usize {
        self.strides[0] * self.width()
    }

    /// Same box with a different boundary tag.
    pub fn with_bc(&self, bc: Boundary) -> Self {
        BoxGeometry {
            bc,
            ..self.clone()
        }
    }

    pub(crate) fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn contains(&self, site: &SiteIndex) -> bool {
        let r = self.radius as i64;
        site.dim() == self.dim && site.0.iter().all(|&c| (-r..=r).contains(&c))
    }

    /// Linear index of `site`, or `None` if it lies outside the box.
    pub fn index_of(&self, site: &SiteIndex) -> Option<usize> {
        if !self.contains(site) {
            return None;
        }
        let r = self.radius as i64;
        Some(
            site.0
                .iter()
                .zip(&self.strides)
                .map(|(&c, &s)| (c + r) as usize * s)
                .sum(),
        )
    }

    pub fn site_at(&self, index: usize) -> SiteIndex {
        let w = self.width();
        let r = self.radius as i64;
        let mut coords = vec![0i64; self.dim];
        let mut rest = index;
        for k in (0..self.dim).rev() {
            coords[k] = (rest % w) as i64 - r;
            rest /= w;
        }
        SiteIndex(coords)
    }

    pub fn origin_index(&self) -> usize {
        self.site_count() / 2
    }

    /// Nearest neighbors of `site` inside the box under its boundary condition.
    ///
    /// Zero and free boundary conditions share the same in-box adjacency;
    /// periodic boundary conditions wrap each coordinate modulo `2n + 1`.
    /// A degenerate torus of width one has no neighbors other than the site
    /// itself, which is never reported.
    pub fn neighbors(&self, site: &SiteIndex) -> Vec<SiteIndex> {
        let Some(idx) = self.index_of(site) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(2 * self.dim);
        self.for_each_neighbor(idx, |j| {
            if j != idx && !out.contains(&j) {
                out.push(j);
            }
        });
        out.into_iter().map(|j| self.site_at(j)).collect()
    }

    /// Calls `f` with the linear index of every neighbor of `index`.
    #[inline]
    pub(crate) fn for_each_neighbor(&self, index: usize, mut f: impl FnMut(usize)) {
        let w = self.width();
        let periodic = self.bc == Boundary::Periodic;
        for axis in 0..self.dim {
            let s = self.strides[axis];
            let off = (index / s) % w;
            if off > 0 {
                f(index - s);
            } else if periodic {
                f(index + (w - 1) * s);
            }
            if off + 1 < w {
                f(index + s);
            } else if periodic {
                f(index - (w - 1) * s);
            }
        }
    }

    /// True if the site touches the inner boundary `∂B_n` (some coordinate equals ±n).
    #[inline]
    pub(crate) fn on_boundary(&self, index: usize) -> bool {
        let w = self.width();
        (0..self.dim).any(|axis| {
            let off = (index / self.strides[axis]) % w;
            off == 0 || off + 1 == w
        })
    }

    /// Sup-norm of the site at `index`.
    #[inline]
    pub fn sup_norm_of(&self, index: usize) -> usize {
        let w = self.width();
        let r = self.radius;
        (0..self.dim)
            .map(|axis| {
                let off = (index / self.strides[axis]) % w;
                off.abs_diff(r)
            })
            .max()
            .unwrap_or(0)
    }

    /// Linear index in `self` of the site with linear index `inner_index` in a
    /// smaller concentric box `inner`.
    pub(crate) fn embed_from(&self, inner: &BoxGeometry, inner_index: usize) -> usize {
        let shift = self.radius - inner.radius;
        let wi = inner.width();
        (0..self.dim)
            .map(|axis| ((inner_index / inner.strides[axis]) % wi + shift) * self.strides[axis])
            .sum()
    }
}

fn checked_volume(dim: usize, radius: usize) -> Result<usize> {
    let width = 2u128 * radius as u128 + 1;
    let mut sites: u128 = 1;
    for _ in 0..dim {
        sites = sites.saturating_mul(width);
        if sites > MAX_SITES as u128 {
            return Err(Error::Capacity {
                sites,
                limit: MAX_SITES,
            });
        }
    }
    usize::try_from(sites).map_err(|_| Error::Capacity {
        sites,
        limit: MAX_SITES,
    })
}

/// Number of sites `(2n + 1)^d`, rejecting boxes beyond [`MAX_SITES`].
pub fn site_count(dim: usize, radius: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::Geometry("dimension must be at least 1".into()));
    }
    checked_volume(dim, radius)
}

/// Lexicographically smallest site of a nonempty set.
pub fn lex_min<'a, I>(sites: I) -> Result<SiteIndex>
where
    I: IntoIterator<Item = &'a SiteIndex>,
{
    sites.into_iter().min().cloned().ok_or(Error::EmptyInput)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(c: &[i64]) -> SiteIndex {
        SiteIndex(c.to_vec())
    }

    fn sorted(mut v: Vec<SiteIndex>) -> Vec<SiteIndex> {
        v.sort();
        v
    }

    #[test]
    fn site_counts() {
        assert_eq!(site_count(1, 1).unwrap(), 3);
        assert_eq!(site_count(2, 1).unwrap(), 9);
        assert_eq!(site_count(3, 2).unwrap(), 125);
    }

    #[test]
    fn capacity_guard() {
        assert!(matches!(site_count(3, 40_000), Err(Error::Capacity { .. })));
        assert!(matches!(site_count(64, 1), Err(Error::Capacity { .. })));
        assert!(site_count(0, 3).is_err());
    }

    #[test]
    fn corner_neighbors_zero_bc() {
        let g = BoxGeometry::new(2, 1, Boundary::Zero).unwrap();
        assert_eq!(
            sorted(g.neighbors(&s(&[1, 1]))),
            vec![s(&[0, 1]), s(&[1, 0])]
        );
    }

    #[test]
    fn corner_neighbors_torus() {
        let g = BoxGeometry::new(2, 1, Boundary::Periodic).unwrap();
        assert_eq!(
            sorted(g.neighbors(&s(&[1, 1]))),
            vec![s(&[-1, 1]), s(&[0, 1]), s(&[1, -1]), s(&[1, 0])]
        );
    }

    #[test]
    fn interior_neighbors_1d() {
        let g = BoxGeometry::new(1, 2, Boundary::Zero).unwrap();
        assert_eq!(sorted(g.neighbors(&s(&[0]))), vec![s(&[-1]), s(&[1])]);
    }

    #[test]
    fn lex_min_examples() {
        assert_eq!(lex_min(&[s(&[1, 0]), s(&[0, 1])]).unwrap(), s(&[0, 1]));
        assert_eq!(lex_min(&[s(&[0, 0])]).unwrap(), s(&[0, 0]));
        assert_eq!(
            lex_min(&[s(&[-1, 2]), s(&[-1, -2]), s(&[0, -5])]).unwrap(),
            s(&[-1, -2])
        );
        assert!(matches!(lex_min(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn linear_order_is_lexicographic() {
        let g = BoxGeometry::new(3, 1, Boundary::Zero).unwrap();
        let sites: Vec<_> = (0..g.site_count()).map(|i| g.site_at(i)).collect();
        assert!(sites.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.site_at(g.origin_index()), SiteIndex::origin(3));
    }

    #[test]
    fn embedding_preserves_coordinates() {
        let inner = BoxGeometry::new(2, 1, Boundary::Zero).unwrap();
        let outer = BoxGeometry::new(2, 3, Boundary::Zero).unwrap();
        for i in 0..inner.site_count() {
            let j = outer.embed_from(&inner, i);
            assert_eq!(outer.site_at(j), inner.site_at(i));
        }
    }

    #[test]
    fn boundary_and_norm_helpers() {
        let g = BoxGeometry::new(2, 2, Boundary::Zero).unwrap();
        for i in 0..g.site_count() {
            let site = g.site_at(i);
            assert_eq!(g.sup_norm_of(i) as i64, site.sup_norm());
            assert_eq!(g.on_boundary(i), site.sup_norm() == 2);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn geometry() -> impl Strategy<Value = BoxGeometry> {
            (1usize..=3, 0usize..=3, 0usize..3).prop_map(|(d, n, b)| {
                let bc = [Boundary::Zero, Boundary::Free, Boundary::Periodic][b];
                BoxGeometry::new(d, n, bc).unwrap()
            })
        }

        proptest! {
            #[test]
            fn index_round_trip(g in geometry()) {
                for i in 0..g.site_count() {
                    prop_assert_eq!(g.index_of(&g.site_at(i)), Some(i));
                }
            }

            #[test]
            fn neighbors_symmetric_and_counted(g in geometry()) {
                for i in 0..g.site_count() {
                    let s = g.site_at(i);
                    let nb = g.neighbors(&s);
                    if g.bc() == Boundary::Periodic && g.radius() >= 1 {
                        prop_assert_eq!(nb.len(), 2 * g.dim());
                    } else if g.radius() >= 1 {
                        prop_assert!(nb.len() >= g.dim() && nb.len() <= 2 * g.dim());
                    }
                    for t in &nb {
                        prop_assert!(g.neighbors(t).contains(&s));
                    }
                }
            }

            #[test]
            fn zero_and_free_adjacency_coincide(d in 1usize..=3, n in 0usize..=3) {
                let z = BoxGeometry::new(d, n, Boundary::Zero).unwrap();
                let f = BoxGeometry::new(d, n, Boundary::Free).unwrap();
                for i in 0..z.site_count() {
                    let s = z.site_at(i);
                    prop_assert_eq!(z.neighbors(&s), f.neighbors(&s));
                }
            }

            #[test]
            fn lex_min_permutation_invariant(mut v in prop::collection::vec(prop::collection::vec(-5i64..5, 2), 1..12)) {
                let sites: Vec<SiteIndex> = v.iter().cloned().map(SiteIndex).collect();
                let m = lex_min(&sites).unwrap();
                v.reverse();
                let rev: Vec<SiteIndex> = v.into_iter().map(SiteIndex).collect();
                prop_assert_eq!(lex_min(&rev).unwrap(), m);
            }
        }
    }
}
