//! Vessel tree sampling and rasterization.
//!
//! A volume holds a few rooted trees of spline branches. Roots run between
//! two points sampled in the volume padded by 20% per side. Each branch
//! spawns children at uniformly drawn parameters along it; a child's radius
//! is its parent's base radius times a log-normal factor, and its chord
//! length shrinks by the same factor. Interior control points are pushed
//! off the chord by Gaussian offsets whose common scale is bisected until
//! the branch reaches its sampled tortuosity.

use std::collections::BTreeSet;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, add, norm, scale, sub, Point3, Spline3D};
use crate::sampling::{DistSpec, SeededRng};
use crate::volume::{voxel_count, LabelVolume, Shape, Volume, DEFAULT_VOXEL_SIZE_UM};

/// Smallest radius a branch may have, in voxels.
pub const MIN_RADIUS_VOXELS: f64 = 0.25;
/// Fraction of each side added around the volume when sampling root endpoints.
pub const ROOT_PADDING: f64 = 0.2;
/// Chord length per control point, in voxels.
pub const VOXELS_PER_CONTROL_POINT: f64 = 16.0;
/// Relative tortuosity error accepted by the jitter search.
pub const TORTUOSITY_RTOL: f64 = 0.05;
const BISECTION_STEPS: usize = 20;
const MIN_CHORD_VOXELS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSynthParams {
    /// Trees per mm³.
    pub tree_density: DistSpec,
    pub children_per_spline: DistSpec,
    pub max_tree_depth: DistSpec,
    pub tortuosity: DistSpec,
    /// Root radius, in units of `root_radius_unit_um`.
    pub root_radius: DistSpec,
    pub child_radius_factor: DistSpec,
    pub radius_fluctuation: DistSpec,
    /// Micrometres per unit of a `root_radius` draw (1000: draws are in mm).
    pub root_radius_unit_um: f64,
    pub volume_shape: Shape,
    pub voxel_size_um: f64,
}

impl Default for LabelSynthParams {
    fn default() -> Self {
        Self {
            tree_density: DistSpec::uniform(0.1, 0.2),
            children_per_spline: DistSpec::uniform_int(1, 7),
            max_tree_depth: DistSpec::uniform_int(1, 7),
            tortuosity: DistSpec::uniform(1.0, 5.0),
            root_radius: DistSpec::lognormal(-1.0, 0.017),
            child_radius_factor: DistSpec::lognormal(-1.0 / 3.0, 0.064),
            radius_fluctuation: DistSpec::lognormal(-0.0085, 0.017),
            root_radius_unit_um: 1000.0,
            volume_shape: [128, 128, 128],
            voxel_size_um: DEFAULT_VOXEL_SIZE_UM,
        }
    }
}

impl LabelSynthParams {
    pub fn validate(&self) -> Result<(), String> {
        let dists = [
            ("tree_density", &self.tree_density),
            ("children_per_spline", &self.children_per_spline),
            ("max_tree_depth", &self.max_tree_depth),
            ("tortuosity", &self.tortuosity),
            ("root_radius", &self.root_radius),
            ("child_radius_factor", &self.child_radius_factor),
            ("radius_fluctuation", &self.radius_fluctuation),
        ];
        for (name, d) in dists {
            d.validate().map_err(|e| format!("labels.{name}: {e}"))?;
        }
        if self.volume_shape.contains(&0) {
            return Err(format!("labels.volume_shape must be positive, got {:?}", self.volume_shape));
        }
        if !(self.voxel_size_um > 0.0) || !(self.root_radius_unit_um > 0.0) {
            return Err("labels.voxel_size_um and labels.root_radius_unit_um must be positive".into());
        }
        Ok(())
    }

    /// Volume of the lattice in mm³.
    pub fn volume_mm3(&self) -> f64 {
        let side_mm = self.voxel_size_um / 1000.0;
        voxel_count(self.volume_shape) as f64 * side_mm.powi(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub spline: Spline3D,
    pub parent: Option<u32>,
    pub depth: u32,
    pub target_tortuosity: f64,
    /// Radius before per-knot fluctuation, in voxels.
    pub base_radius: f64,
}

impl Branch {
    pub fn id(&self) -> u32 {
        self.spline.branch_id()
    }
}

/// A rooted tree of branches, parents always listed before children.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VesselTree {
    pub branches: Vec<Branch>,
    /// Sampled depth bound; every branch depth is below it.
    pub depth_bound: u32,
}

impl VesselTree {
    pub fn root(&self) -> Option<&Branch> {
        self.branches.first()
    }

    pub fn branch(&self, id: u32) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id() == id)
    }

    pub fn parent(&self, id: u32) -> Option<u32> {
        self.branch(id).and_then(|b| b.parent)
    }

    pub fn depth(&self, id: u32) -> Option<u32> {
        self.branch(id).map(|b| b.depth)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.branches.iter().map(Branch::id)
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    /// Shift every id (and parent reference) by `offset`.
    pub fn offset_ids(&mut self, offset: u32) {
        for b in &mut self.branches {
            let id = b.id() + offset;
            b.spline.set_branch_id(id);
            b.parent = b.parent.map(|p| p + offset);
        }
    }
}

fn clamp_radius(r: f64, what: &str) -> f64 {
    if r < MIN_RADIUS_VOXELS {
        debug!("{what} radius {r:.4} voxel clamped to {MIN_RADIUS_VOXELS}");
        MIN_RADIUS_VOXELS
    } else {
        r
    }
}

fn random_direction(rng: &mut SeededRng) -> Point3 {
    loop {
        let v = [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()];
        let n = norm(v);
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Two unit vectors spanning the plane orthogonal to `dir` (unit).
fn orthonormal_frame(dir: Point3) -> (Point3, Point3) {
    let helper = if dir[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = {
        let d = geometry::dot(helper, dir);
        let v = sub(helper, scale(dir, d));
        scale(v, 1.0 / norm(v))
    };
    let w = [
        dir[1] * u[2] - dir[2] * u[1],
        dir[2] * u[0] - dir[0] * u[2],
        dir[0] * u[1] - dir[1] * u[0],
    ];
    (u, w)
}

/// Control points between `start` and `end`, jittered so the interpolating
/// spline's tortuosity is within tolerance of `target`. Returns the points
/// and the achieved tortuosity.
pub fn jitter_to_tortuosity(start: Point3, end: Point3, target: f64, rng: &mut SeededRng) -> (Vec<Point3>, f64) {
    let chord_vec = sub(end, start);
    let chord = norm(chord_vec);
    let n = ((chord / VOXELS_PER_CONTROL_POINT).round() as usize).max(4);
    let base: Vec<Point3> = (0..n).map(|i| add(start, scale(chord_vec, i as f64 / (n - 1) as f64))).collect();
    if target <= 1.0 + 1e-9 || chord < 1e-9 {
        return (base, 1.0);
    }
    let dir = scale(chord_vec, 1.0 / chord);
    let (u, w) = orthonormal_frame(dir);
    let spacing = chord / (n - 1) as f64;

    let mut best: Option<(Vec<Point3>, f64)> = None;
    for attempt in 0..5 {
        let offsets: Vec<Point3> = (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    [0.0; 3]
                } else {
                    let (a, b) = (rng.standard_normal(), rng.standard_normal());
                    scale(add(scale(u, a), scale(w, b)), spacing)
                }
            })
            .collect();
        let points_at = |s: f64| -> Vec<Point3> { base.iter().zip(&offsets).map(|(p, o)| add(*p, scale(*o, s))).collect() };
        let tort_at = |s: f64| -> f64 {
            Spline3D::with_constant_radius(&points_at(s), 1.0, 0)
                .ok()
                .and_then(|sp| sp.tortuosity().ok())
                .unwrap_or(1.0)
        };

        let (mut lo, mut hi) = (0.0, 1.0);
        let mut t_hi = tort_at(hi);
        let mut doublings = 0;
        while t_hi < target && doublings < 40 {
            lo = hi;
            hi *= 2.0;
            t_hi = tort_at(hi);
            doublings += 1;
        }
        let mut s_best = hi;
        let mut t_best = t_hi;
        for _ in 0..BISECTION_STEPS {
            if (t_best / target - 1.0).abs() <= 0.01 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let t_mid = tort_at(mid);
            if t_mid < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if (t_mid / target - 1.0).abs() < (t_best / target - 1.0).abs() {
                s_best = mid;
                t_best = t_mid;
            }
        }
        let better = best.as_ref().map_or(true, |(_, t)| (t_best / target - 1.0).abs() < (t / target - 1.0).abs());
        if better {
            best = Some((points_at(s_best), t_best));
        }
        if (t_best / target - 1.0).abs() <= TORTUOSITY_RTOL {
            break;
        }
        debug!("tortuosity jitter attempt {attempt} reached {t_best:.3} for target {target:.3}; redrawing offsets");
    }
    let (points, achieved) = best.expect("at least one attempt");
    if (achieved / target - 1.0).abs() > TORTUOSITY_RTOL {
        warn!("branch tortuosity {achieved:.3} misses target {target:.3} by more than 5%");
    }
    (points, achieved)
}

fn build_branch(
    params: &LabelSynthParams,
    start: Point3,
    end: Point3,
    base_radius: f64,
    id: u32,
    parent: Option<u32>,
    depth: u32,
    rng: &mut SeededRng,
) -> Branch {
    let target = params.tortuosity.sample(rng);
    let (points, _) = jitter_to_tortuosity(start, end, target, rng);
    let radii: Vec<f64> = (0..points.len())
        .map(|_| clamp_radius(base_radius * params.radius_fluctuation.sample(rng), "fluctuated"))
        .collect();
    let spline = Spline3D::new(&points, &radii, id)
        .or_else(|_| Spline3D::with_constant_radius(&points, base_radius, id))
        .expect("control points are finite and radius positive");
    Branch { spline, parent, depth, target_tortuosity: target, base_radius }
}

/// Sample one tree. Branch ids run from 1 in creation order.
pub fn synthesize_tree(params: &LabelSynthParams, rng: &mut SeededRng) -> VesselTree {
    let depth_bound = params.max_tree_depth.sample_int(rng).max(1) as u32;
    let shape = params.volume_shape;
    let sample_padded = |rng: &mut SeededRng| -> Point3 {
        let mut p = [0.0; 3];
        for k in 0..3 {
            let n = shape[k] as f64;
            p[k] = -ROOT_PADDING * n + rng.unit() * (1.0 + 2.0 * ROOT_PADDING) * n;
        }
        p
    };
    let (start, end) = loop {
        let (a, b) = (sample_padded(rng), sample_padded(rng));
        if norm(sub(a, b)) >= MIN_CHORD_VOXELS {
            break (a, b);
        }
    };
    let root_radius = clamp_radius(
        params.root_radius.sample(rng) * params.root_radius_unit_um / params.voxel_size_um,
        "root",
    );

    let mut branches = vec![build_branch(params, start, end, root_radius, 1, None, 0, rng)];
    let mut next_id = 2u32;
    let mut level_start = 0;
    for depth in 1..depth_bound {
        let level_end = branches.len();
        for parent_idx in level_start..level_end {
            let n_children = params.children_per_spline.sample_int(rng).max(0);
            for _ in 0..n_children {
                let parent = &branches[parent_idx];
                let t = rng.unit();
                let start = parent.spline.point_at(t);
                let factor = params.child_radius_factor.sample(rng);
                let radius = clamp_radius(parent.base_radius * factor, "child");
                let length = (parent.spline.chord_length() * factor).max(MIN_CHORD_VOXELS);
                let end = add(start, scale(random_direction(rng), length));
                let parent_id = parent.id();
                let child = build_branch(params, start, end, radius, next_id, Some(parent_id), depth, rng);
                branches.push(child);
                next_id += 1;
            }
        }
        level_start = level_end;
        if level_start == branches.len() {
            break;
        }
    }
    VesselTree { branches, depth_bound }
}

/// Number of trees implied by a density draw for this lattice.
pub fn tree_count(params: &LabelSynthParams, density: f64) -> usize {
    (density * params.volume_mm3()).round().max(0.0) as usize
}

/// Sample all trees for one volume, with ids unique across trees.
pub fn synthesize_trees(params: &LabelSynthParams, rng: &mut SeededRng) -> Vec<VesselTree> {
    let density = params.tree_density.sample(rng);
    let n_trees = tree_count(params, density);
    let mut offset = 0u32;
    (0..n_trees)
        .map(|i| {
            let mut tree = synthesize_tree(params, &mut rng.fork(i as u64));
            tree.offset_ids(offset);
            offset += tree.len() as u32;
            tree
        })
        .collect()
}

/// Sample trees and rasterize them onto an empty lattice.
pub fn synthesize_label_volume(params: &LabelSynthParams, rng: &mut SeededRng) -> (LabelVolume, Vec<VesselTree>) {
    let trees = synthesize_trees(params, rng);
    let mut volume = Volume::filled(params.volume_shape, params.voxel_size_um, 0i32);
    rasterize_all(&trees, &mut volume);
    (volume, trees)
}

/// Same result as calling [`rasterize`] on each tree in order, but walks
/// branches last-to-first and skips voxels a later branch already owns.
pub fn rasterize_all(trees: &[VesselTree], volume: &mut LabelVolume) {
    let mut claimed = vec![false; volume.len()];
    for branch in trees.iter().flat_map(|t| &t.branches).rev() {
        burn(&branch.spline, volume, Some(&mut claimed));
    }
}

/// Burn every branch of `tree` into `volume`, branches in order so children
/// overwrite their parents.
pub fn rasterize(tree: &VesselTree, volume: &mut LabelVolume) {
    for branch in &tree.branches {
        rasterize_spline(&branch.spline, volume);
    }
}

/// Label every voxel whose center lies within the local radius of the
/// centerline (distance at the nearest point against the radius there).
pub fn rasterize_spline(spline: &Spline3D, volume: &mut LabelVolume) {
    burn(spline, volume, None);
}

fn burn(spline: &Spline3D, volume: &mut LabelVolume, mut claimed: Option<&mut Vec<bool>>) {
    let shape = volume.shape();
    let r_max = spline.max_radius();
    let (lo, hi) = spline.bounds();
    let mut bmin = [0usize; 3];
    let mut bmax = [0usize; 3];
    for k in 0..3 {
        let a = (lo[k] - r_max).ceil().max(0.0);
        let b = (hi[k] + r_max).floor().min(shape[k] as f64 - 1.0);
        if a > b {
            return;
        }
        bmin[k] = a as usize;
        bmax[k] = b as usize;
    }
    let ext = [bmax[0] - bmin[0] + 1, bmax[1] - bmin[1] + 1, bmax[2] - bmin[2] + 1];

    // Candidate voxels: within r_max + half a sample spacing of some
    // centerline sample. Every curve point is within half a spacing of a
    // sample, so voxels outside this set cannot be labeled.
    let spacing = (0.5 * r_max).clamp(0.5, 4.0);
    let arc = spline.arc_length();
    let per_segment = ((arc / spline.segments() as f64 / spacing * 1.5).ceil() as usize).max(2);
    let n_samples = per_segment * spline.segments() + 1;
    let mut samples: Vec<Point3> = Vec::with_capacity(n_samples);
    let mut last: Option<Point3> = None;
    for i in 0..n_samples {
        let p = spline.point_at(i as f64 / (n_samples - 1) as f64);
        if let Some(q) = last {
            // Fill in when the polyline step exceeds the spacing.
            let step = norm(sub(p, q));
            if step > spacing {
                let extra = (step / spacing).ceil() as usize;
                let t0 = (i - 1) as f64 / (n_samples - 1) as f64;
                let t1 = i as f64 / (n_samples - 1) as f64;
                for j in 1..extra {
                    samples.push(spline.point_at(t0 + (t1 - t0) * j as f64 / extra as f64));
                }
            }
        }
        samples.push(p);
        last = Some(p);
    }
    // 1 voxel of slack absorbs the polyline-vs-arc approximation.
    let reach = r_max + 0.5 * spacing + 1.0;
    let reach2 = reach * reach;
    let mut candidate = vec![false; ext[0] * ext[1] * ext[2]];
    let mut any = false;
    for p in &samples {
        let mut cmin = [0usize; 3];
        let mut cmax = [0usize; 3];
        let mut inside = true;
        for k in 0..3 {
            let a = (p[k] - reach).ceil().max(bmin[k] as f64);
            let b = (p[k] + reach).floor().min(bmax[k] as f64);
            if a > b {
                inside = false;
                break;
            }
            cmin[k] = a as usize - bmin[k];
            cmax[k] = b as usize - bmin[k];
        }
        if !inside {
            continue;
        }
        for z in cmin[2]..=cmax[2] {
            let dz = (z + bmin[2]) as f64 - p[2];
            for y in cmin[1]..=cmax[1] {
                let dy = (y + bmin[1]) as f64 - p[1];
                let ryz = dz * dz + dy * dy;
                if ryz > reach2 {
                    continue;
                }
                let half = (reach2 - ryz).sqrt();
                let x0 = ((p[0] - half).ceil().max((cmin[0] + bmin[0]) as f64)) as usize - bmin[0];
                let x1f = (p[0] + half).floor().min((cmax[0] + bmin[0]) as f64);
                if x1f < (x0 + bmin[0]) as f64 {
                    continue;
                }
                let x1 = x1f as usize - bmin[0];
                let row = ext[0] * (y + ext[1] * z);
                candidate[row + x0..=row + x1].fill(true);
                any = true;
            }
        }
    }
    if !any {
        return;
    }

    let candidates: Vec<usize> = candidate
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            if !c {
                return None;
            }
            match claimed.as_deref() {
                Some(mask) => {
                    let x = i % ext[0];
                    let y = (i / ext[0]) % ext[1];
                    let z = i / (ext[0] * ext[1]);
                    (!mask[volume.index(x + bmin[0], y + bmin[1], z + bmin[2])]).then_some(i)
                }
                None => Some(i),
            }
        })
        .collect();
    let hits: Vec<usize> = candidates
        .par_iter()
        .with_min_len(256)
        .filter_map(|&i| {
            let x = i % ext[0];
            let y = (i / ext[0]) % ext[1];
            let z = i / (ext[0] * ext[1]);
            let (gx, gy, gz) = (x + bmin[0], y + bmin[1], z + bmin[2]);
            let np = spline.nearest_point([gx as f64, gy as f64, gz as f64]);
            (np.distance <= spline.radius_at(np.t_star)).then(|| volume.index(gx, gy, gz))
        })
        .collect();
    let id = spline.branch_id() as i32;
    let data = volume.data_mut();
    for i in hits {
        data[i] = id;
        if let Some(mask) = claimed.as_deref_mut() {
            mask[i] = true;
        }
    }
}

/// Non-root branches selected for removal, each independently with
/// probability `drop_prob`.
pub fn sample_dropped_branches(trees: &[VesselTree], drop_prob: f64, rng: &mut SeededRng) -> BTreeSet<u32> {
    let mut dropped = BTreeSet::new();
    for tree in trees {
        for b in &tree.branches {
            if b.parent.is_some() && rng.unit() < drop_prob {
                dropped.insert(b.id());
            }
        }
    }
    dropped
}

/// Zero the voxels of randomly removed non-root branches.
pub fn drop_branches(volume: &LabelVolume, trees: &[VesselTree], drop_prob: f64, rng: &mut SeededRng) -> LabelVolume {
    assert!((0.0..=1.0).contains(&drop_prob), "drop probability {drop_prob} outside [0, 1]");
    let dropped = sample_dropped_branches(trees, drop_prob, rng);
    if dropped.is_empty() {
        return volume.clone();
    }
    volume.map(|&v| if v > 0 && dropped.contains(&(v as u32)) { 0 } else { v })
}
