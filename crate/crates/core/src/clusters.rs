//! Cluster labeling and maximal-cluster statistics.
//!
//! Labels are assigned in the lexicographic order of the clusters' left
//! endpoints, so two labelings of the same configuration agree label by label
//! regardless of the order in which sites were merged.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Boundary, BoxGeometry, SiteIndex};
use crate::sampler::SiteConfig;
use crate::unionfind::UnionFind;

/// Per-cluster summary inside a [`ClusterCensus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterInfo {
    pub size: usize,
    /// Linear index of the lexicographically smallest site.
    pub left_endpoint: usize,
    /// Whether some site lies on `∂B_n`; always false on a torus.
    pub touches_boundary: bool,
}

/// Result of labeling the occupied subgraph of a configuration.
#[derive(Debug, Clone)]
pub struct ClusterCensus {
    geometry: BoxGeometry,
    labels: Vec<u32>,
    clusters: Vec<ClusterInfo>,
}

const VACANT: u32 = u32::MAX;

impl ClusterCensus {
    pub fn geometry(&self) -> &BoxGeometry {
        &self.geometry
    }

    /// Cluster label of the site at `index`, `None` if vacant.
    pub fn label(&self, index: usize) -> Option<u32> {
        match self.labels[index] {
            VACANT => None,
            l => Some(l),
        }
    }

    pub fn clusters(&self) -> &[ClusterInfo] {
        &self.clusters
    }

    pub fn cluster(&self, label: u32) -> &ClusterInfo {
        &self.clusters[label as usize]
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn left_endpoint(&self, label: u32) -> SiteIndex {
        self.geometry.site_at(self.clusters[label as usize].left_endpoint)
    }

    /// Size of the cluster containing `index` (0 if vacant).
    pub fn size_at(&self, index: usize) -> usize {
        self.label(index).map_or(0, |l| self.clusters[l as usize].size)
    }

    /// `|C_le(x)|` for the site at `index`: its cluster size if it is the
    /// cluster's left endpoint, else 0.
    pub fn le_size_at(&self, index: usize) -> usize {
        match self.label(index) {
            Some(l) if self.clusters[l as usize].left_endpoint == index => {
                self.clusters[l as usize].size
            }
            _ => 0,
        }
    }

    /// Sizes in label order.
    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.clusters.iter().map(|c| c.size)
    }

    /// CSV export with columns `label,size,le_coords,touches_boundary`;
    /// coordinates are space separated.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "label,size,le_coords,touches_boundary")?;
        for (label, c) in self.clusters.iter().enumerate() {
            let le = self.geometry.site_at(c.left_endpoint);
            let coords: Vec<String> = le.0.iter().map(|x| x.to_string()).collect();
            writeln!(
                out,
                "{label},{},{},{}",
                c.size,
                coords.join(" "),
                c.touches_boundary
            )?;
        }
        Ok(())
    }
}

/// Labels the connected components of the occupied sites under the
/// configuration's adjacency (periodic boxes wrap).
pub fn label_clusters(cfg: &SiteConfig) -> ClusterCensus {
    label_in_order(cfg, false)
}

fn label_in_order(cfg: &SiteConfig, reverse: bool) -> ClusterCensus {
    let g = cfg.geometry();
    let n = g.site_count();
    let occ = cfg.occupied();
    let mut uf = UnionFind::new(n);
    let visit = |i: usize, uf: &mut UnionFind| {
        if !occ[i] {
            return;
        }
        g.for_each_neighbor(i, |j| {
            if j > i && occ[j] {
                uf.union(i, j);
            }
        });
    };
    if reverse {
        (0..n).rev().for_each(|i| visit(i, &mut uf));
    } else {
        (0..n).for_each(|i| visit(i, &mut uf));
    }

    let periodic = g.bc() == Boundary::Periodic;
    let mut root_label = vec![VACANT; n];
    let mut labels = vec![VACANT; n];
    let mut clusters: Vec<ClusterInfo> = Vec::new();
    for i in 0..n {
        if !occ[i] {
            continue;
        }
        let r = uf.find(i);
        let l = if root_label[r] == VACANT {
            let l = clusters.len() as u32;
            root_label[r] = l;
            clusters.push(ClusterInfo {
                size: uf.root_size(r),
                left_endpoint: i,
                touches_boundary: false,
            });
            l
        } else {
            root_label[r]
        };
        labels[i] = l;
        if !periodic && g.on_boundary(i) {
            clusters[l as usize].touches_boundary = true;
        }
    }
    ClusterCensus {
        geometry: g.clone(),
        labels,
        clusters,
    }
}

/// Largest cluster size, 0 for an empty census.
pub fn max_cluster(c: &ClusterCensus) -> usize {
    c.sizes().max().unwrap_or(0)
}

/// Which clusters count as infinite when restricting to finite clusters.
#[derive(Debug, Clone, Copy)]
pub enum FiniteRule<'a> {
    /// Exclude clusters touching `∂B_n` of the census box.
    BoxBoundary,
    /// Exclude clusters whose sites belong to a cluster of the given ambient
    /// census (a concentric, larger box) touching the ambient boundary.
    AmbientBoundary(&'a ClusterCensus),
}

/// Largest cluster not excluded by `rule`; 0 when every cluster is excluded.
pub fn max_finite_cluster(c: &ClusterCensus, rule: FiniteRule<'_>) -> Result<usize> {
    match rule {
        FiniteRule::BoxBoundary => Ok(c
            .clusters
            .iter()
            .filter(|k| !k.touches_boundary)
            .map(|k| k.size)
            .max()
            .unwrap_or(0)),
        FiniteRule::AmbientBoundary(amb) => {
            let g = c.geometry();
            let ag = amb.geometry();
            if ag.dim() != g.dim() || ag.radius() < g.radius() {
                return Err(Error::param(
                    "ambient",
                    "ambient census must be a concentric box at least as large",
                ));
            }
            let mut excluded = vec![false; c.len()];
            for i in 0..g.site_count() {
                if let Some(l) = c.label(i) {
                    let j = ag.embed_from(g, i);
                    if let Some(al) = amb.label(j) {
                        if amb.cluster(al).touches_boundary {
                            excluded[l as usize] = true;
                        }
                    }
                }
            }
            Ok(c.clusters
                .iter()
                .zip(&excluded)
                .filter(|(_, &e)| !e)
                .map(|(k, _)| k.size)
                .max()
                .unwrap_or(0))
        }
    }
}

/// `(|C(0)|, |C_le(0)|)` in the configuration's box.
pub fn cluster_at_origin(cfg: &SiteConfig) -> (usize, usize) {
    let census = label_clusters(cfg);
    let o = cfg.geometry().origin_index();
    (census.size_at(o), census.le_size_at(o))
}

/// Maximal cluster sizes of one realization under every boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxClusterResult {
    /// Zero boundary: exterior of `B_n` vacant.
    pub m_zb: usize,
    /// Free boundary: clusters of the ambient configuration meeting `B_n`.
    pub m_fb: usize,
    /// Periodic: `B_n` re-labeled as a torus.
    pub m_pb: usize,
    /// Largest zero-boundary cluster not touching `∂B_n`.
    pub m_finite: usize,
    /// Largest ambient cluster meeting `B_n` and not touching the ambient boundary.
    pub m_fb_finite: usize,
}

/// Computes all boundary variants of `M_n` from one ambient realization on
/// `B_{n+m}`, `m >= 1`.
pub fn max_cluster_all_bc(ambient: &SiteConfig, n: usize) -> Result<MaxClusterResult> {
    let ag = ambient.geometry();
    if ag.radius() < n + 1 {
        return Err(Error::param(
            "margin",
            format!(
                "ambient radius {} leaves no margin around radius {n}",
                ag.radius()
            ),
        ));
    }
    let zb_cfg = ambient.restrict(n, Boundary::Zero)?;
    let zb = label_clusters(&zb_cfg);
    let pb = label_clusters(&zb_cfg.with_bc(Boundary::Periodic));
    let amb = label_clusters(&ambient.with_bc(Boundary::Zero));

    let inner = zb.geometry();
    let mut m_fb = 0;
    let mut m_fb_finite = 0;
    for i in 0..inner.site_count() {
        let j = ag.embed_from(inner, i);
        if let Some(l) = amb.label(j) {
            let k = amb.cluster(l);
            m_fb = m_fb.max(k.size);
            if !k.touches_boundary {
                m_fb_finite = m_fb_finite.max(k.size);
            }
        }
    }
    Ok(MaxClusterResult {
        m_zb: max_cluster(&zb),
        m_fb,
        m_pb: max_cluster(&pb),
        m_finite: max_finite_cluster(&zb, FiniteRule::BoxBoundary)?,
        m_fb_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_bernoulli, BernoulliSpec, SeedSpec};

    fn s(c: &[i64]) -> SiteIndex {
        SiteIndex(c.to_vec())
    }

    fn cfg(d: usize, n: usize, bc: Boundary, sites: &[&[i64]]) -> SiteConfig {
        let g = BoxGeometry::new(d, n, bc).unwrap();
        let v: Vec<SiteIndex> = sites.iter().map(|c| s(c)).collect();
        SiteConfig::from_sites(g, &v).unwrap()
    }

    #[test]
    fn vacant_census_is_empty() {
        let g = BoxGeometry::new(2, 2, Boundary::Zero).unwrap();
        let c = label_clusters(&SiteConfig::vacant(g));
        assert!(c.is_empty());
        assert_eq!(max_cluster(&c), 0);
        assert!(c.label(0).is_none());
    }

    #[test]
    fn full_box_single_cluster() {
        let g = BoxGeometry::new(2, 1, Boundary::Zero).unwrap();
        let all: Vec<SiteIndex> = (0..9).map(|i| g.site_at(i)).collect();
        let c = label_clusters(&SiteConfig::from_sites(g, &all).unwrap());
        assert_eq!(c.len(), 1);
        assert_eq!(c.cluster(0).size, 9);
        assert_eq!(c.left_endpoint(0), s(&[-1, -1]));
        assert!(c.cluster(0).touches_boundary);
        assert_eq!(max_finite_cluster(&c, FiniteRule::BoxBoundary).unwrap(), 0);
    }

    #[test]
    fn three_site_pattern() {
        let c = label_clusters(&cfg(2, 1, Boundary::Zero, &[&[-1, -1], &[-1, 0], &[1, 1]]));
        let mut got: Vec<(usize, SiteIndex)> =
            (0..c.len() as u32).map(|l| (c.cluster(l).size, c.left_endpoint(l))).collect();
        got.sort();
        assert_eq!(got, vec![(1, s(&[1, 1])), (2, s(&[-1, -1]))]);
    }

    #[test]
    fn max_cluster_examples() {
        let c = label_clusters(&cfg(1, 2, Boundary::Zero, &[&[-2], &[-1], &[1], &[2]]));
        assert_eq!(max_cluster(&c), 2);
    }

    #[test]
    fn finite_cluster_with_crossing_giant() {
        // Top row and middle column form a crossing cluster; an isolated
        // 3-site interior piece would need room, so use radius 2 with the
        // giant on row -2 and column -2, and an L-shaped triple at (0,0),(0,1),(1,1).
        let mut sites: Vec<Vec<i64>> = Vec::new();
        for y in -2..=2 {
            sites.push(vec![-2, y]);
        }
        for x in -2..=2 {
            sites.push(vec![x, -2]);
        }
        sites.extend([vec![0, 0], vec![0, 1], vec![1, 1]]);
        let refs: Vec<&[i64]> = sites.iter().map(|v| v.as_slice()).collect();
        let c = label_clusters(&cfg(2, 2, Boundary::Zero, &refs));
        assert_eq!(max_cluster(&c), 9);
        assert_eq!(max_finite_cluster(&c, FiniteRule::BoxBoundary).unwrap(), 3);
    }

    #[test]
    fn finite_equals_max_without_boundary_contact() {
        let c = label_clusters(&cfg(2, 3, Boundary::Zero, &[&[0, 0], &[0, 1], &[1, -1]]));
        assert_eq!(
            max_finite_cluster(&c, FiniteRule::BoxBoundary).unwrap(),
            max_cluster(&c)
        );
    }

    #[test]
    fn origin_cluster_examples() {
        assert_eq!(cluster_at_origin(&cfg(1, 3, Boundary::Zero, &[&[0], &[1], &[2]])), (3, 3));
        let (c, le) = cluster_at_origin(&cfg(1, 3, Boundary::Zero, &[&[-1], &[0]]));
        assert!(c >= 2);
        assert_eq!(le, 0);
        assert_eq!(cluster_at_origin(&cfg(1, 3, Boundary::Zero, &[&[1]])), (0, 0));
    }

    #[test]
    fn all_bc_examples() {
        let g = BoxGeometry::new(1, 2, Boundary::Zero).unwrap();
        let r = max_cluster_all_bc(&SiteConfig::vacant(g.clone()), 1).unwrap();
        assert_eq!(r, MaxClusterResult { m_zb: 0, m_fb: 0, m_pb: 0, m_finite: 0, m_fb_finite: 0 });

        let amb = SiteConfig::from_sites(g.clone(), &[s(&[1]), s(&[2])]).unwrap();
        let r = max_cluster_all_bc(&amb, 1).unwrap();
        assert_eq!(r.m_zb, 1);
        assert_eq!(r.m_fb, 2);

        assert!(max_cluster_all_bc(&amb, 2).is_err());
    }

    #[test]
    fn boundary_free_realization_agrees() {
        let amb = cfg(2, 4, Boundary::Zero, &[&[0, 0], &[0, 1], &[-1, 0], &[1, -1]]);
        let r = max_cluster_all_bc(&amb, 2).unwrap();
        assert_eq!((r.m_zb, r.m_fb, r.m_pb), (3, 3, 3));
    }

    #[test]
    fn torus_wraps_clusters() {
        let c = label_clusters(&cfg(1, 2, Boundary::Periodic, &[&[-2], &[2]]));
        assert_eq!(max_cluster(&c), 2);
        assert!(!c.cluster(0).touches_boundary);
    }

    #[test]
    fn ambient_rule_excludes_only_ambient_crossers() {
        // Inner box radius 1 inside ambient radius 3; the cluster at the inner
        // boundary is finite in the ambient box.
        let amb_cfg = cfg(1, 3, Boundary::Zero, &[&[1], &[2], &[-3], &[-2], &[-1]]);
        let amb = label_clusters(&amb_cfg);
        let inner = label_clusters(&amb_cfg.restrict(1, Boundary::Zero).unwrap());
        assert_eq!(max_finite_cluster(&inner, FiniteRule::BoxBoundary).unwrap(), 0);
        assert_eq!(
            max_finite_cluster(&inner, FiniteRule::AmbientBoundary(&amb)).unwrap(),
            1
        );
    }

    #[test]
    fn csv_export() {
        let c = label_clusters(&cfg(2, 1, Boundary::Zero, &[&[-1, -1], &[-1, 0], &[0, 0]]));
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "label,size,le_coords,touches_boundary\n0,3,-1 -1,true\n");
    }

    fn random_cfg(d: usize, n: usize, p: f64, r: u64) -> SiteConfig {
        let g = BoxGeometry::new(d, n, Boundary::Zero).unwrap();
        sample_bernoulli(&g, BernoulliSpec::new(p).unwrap(), SeedSpec::new(31, r))
    }

    #[test]
    fn census_invariants_on_random_configs() {
        for r in 0..40 {
            let cfg = random_cfg(2, 6, 0.55, r);
            let c = label_clusters(&cfg);
            let g = cfg.geometry();
            // sizes sum to the occupied count; le-sum identity
            assert_eq!(c.sizes().sum::<usize>(), cfg.occupied_count());
            let le_sum: usize = (0..g.site_count()).map(|i| c.le_size_at(i)).sum();
            assert_eq!(le_sum, cfg.occupied_count());
            // max over le clusters equals max over plain clusters
            let m_le = (0..g.site_count()).map(|i| c.le_size_at(i)).max().unwrap_or(0);
            let m_c = (0..g.site_count()).map(|i| c.size_at(i)).max().unwrap_or(0);
            assert_eq!(m_le, m_c);
            assert_eq!(m_c, max_cluster(&c));
            // neighboring occupied sites share labels; left endpoints are lex minima
            for i in 0..g.site_count() {
                if let Some(l) = c.label(i) {
                    assert!(c.cluster(l).left_endpoint <= i);
                    g.for_each_neighbor(i, |j| {
                        if cfg.is_occupied(j) {
                            assert_eq!(c.label(j), Some(l));
                        }
                    });
                }
            }
            // scan order does not change the census
            let rev = label_in_order(&cfg, true);
            assert_eq!(rev.clusters(), c.clusters());
        }
    }

    #[test]
    fn adding_a_site_never_decreases_the_maximum() {
        for r in 0..20 {
            let mut cfg = random_cfg(2, 5, 0.4, r);
            let before = max_cluster(&label_clusters(&cfg));
            let vacant: Vec<usize> = (0..cfg.geometry().site_count()).filter(|&i| !cfg.is_occupied(i)).collect();
            if let Some(&i) = vacant.get(r as usize % vacant.len().max(1)) {
                cfg.set(i, true);
                assert!(max_cluster(&label_clusters(&cfg)) >= before);
            }
        }
    }

    #[test]
    fn nested_boxes_are_monotone() {
        for r in 0..10 {
            let amb = random_cfg(2, 20, 0.45, r);
            let mut prev = 0;
            for n in 0..=20 {
                let m = max_cluster(&label_clusters(&amb.restrict(n, Boundary::Zero).unwrap()));
                assert!(m >= prev);
                prev = m;
            }
        }
    }

    #[test]
    fn zb_below_fb_and_finite_below_zb() {
        for r in 0..30 {
            let amb = random_cfg(2, 12, 0.6, r);
            let res = max_cluster_all_bc(&amb, 6).unwrap();
            assert!(res.m_zb <= res.m_fb);
            assert!(res.m_finite <= res.m_zb);
        }
    }
}
