use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    Fragment, SceneGraph, SceneGraphError, ScenePair, SceneNode, NUM_RELATIONS, REL_NEAR,
    REL_SUPPORTED_BY, REL_SUPPORTS,
};
use crate::geometry::{PointCloud, RigidTransform};

/// Centroid distance below which two objects are related as "near".
pub const NEAR_RADIUS: f64 = 1.2;
const GROUP_CLEARANCE: f64 = 1.3;
const MAX_ITEM_SIZE: f64 = 0.28;
const JITTER: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Sphere,
    Cylinder,
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    #[default]
    Standard,
    /// A support carrying three items of one class with identical extents
    /// and different shapes, placed in the overlap.
    SymmetricStress,
    /// An exact clone pair: one copy in the overlap, the other only in the
    /// source fragment.
    TwinObjects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Inclusive range of node counts for each fragment.
    pub nodes_per_fragment: (usize, usize),
    /// Inclusive range of the overlap fraction.
    pub overlap: (f64, f64),
    pub num_classes: usize,
    pub points_per_object: (usize, usize),
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub noise_sigma: f64,
    pub preset: ScenePreset,
    pub dynamic_objects: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            nodes_per_fragment: (5, 9),
            overlap: (0.3, 1.0),
            num_classes: 12,
            points_per_object: (80, 140),
            max_rotation_deg: 180.0,
            max_translation: 3.0,
            noise_sigma: 0.0,
            preset: ScenePreset::Standard,
            dynamic_objects: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SceneGraphError> {
        let bad = |msg: &str| Err(SceneGraphError::InfeasibleConfig(msg.to_string()));
        let (nlo, nhi) = self.nodes_per_fragment;
        if nlo == 0 || nlo > nhi {
            return bad("nodes_per_fragment must satisfy 1 ≤ min ≤ max");
        }
        let (olo, ohi) = self.overlap;
        if !(0.0..=1.0).contains(&olo) || !(0.0..=1.0).contains(&ohi) || olo > ohi {
            return bad("overlap must satisfy 0 ≤ min ≤ max ≤ 1");
        }
        if self.num_classes < 3 {
            return bad("num_classes must be at least 3");
        }
        let (plo, phi) = self.points_per_object;
        if plo < 8 || plo > phi {
            return bad("points_per_object must satisfy 8 ≤ min ≤ max");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.max_translation >= 0.0) || !(self.max_rotation_deg >= 0.0) {
            return bad("transform magnitudes must be non-negative");
        }
        match self.preset {
            ScenePreset::SymmetricStress if nhi < 4 => bad("symmetric preset needs at least 4 nodes per fragment"),
            ScenePreset::TwinObjects if nhi < 2 => bad("twin preset needs at least 2 nodes per fragment"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Support,
    Item,
    Standalone,
}

fn role(class: usize) -> Role {
    match class % 3 {
        0 => Role::Support,
        1 => Role::Item,
        _ => Role::Standalone,
    }
}

/// Deterministic shape and nominal size of a class.
pub fn class_profile(class: usize) -> (Shape, [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + class as u64);
    let variant = (class / 3) % 3;
    match role(class) {
        Role::Support => (
            if variant == 2 { Shape::Plane } else { Shape::Box },
            [rng.random_range(1.05..1.5), rng.random_range(0.6..0.9), rng.random_range(0.45..0.8)],
        ),
        Role::Item => {
            let shape = [Shape::Sphere, Shape::Box, Shape::Cylinder][variant];
            let s = rng.random_range(0.16..0.24);
            match shape {
                Shape::Sphere => (shape, [s, s, s]),
                _ => (shape, [s, rng.random_range(0.7..1.0) * s, rng.random_range(0.16..0.24)]),
            }
        }
        Role::Standalone => {
            let shape = [Shape::Box, Shape::Cylinder, Shape::Sphere][variant];
            match shape {
                Shape::Sphere => {
                    let d = rng.random_range(0.4..0.7);
                    (shape, [d, d, d])
                }
                Shape::Cylinder => {
                    let d = rng.random_range(0.35..0.6);
                    (shape, [d, d, rng.random_range(0.6..1.3)])
                }
                _ => (
                    shape,
                    [rng.random_range(0.4..0.9), rng.random_range(0.35..0.7), rng.random_range(0.5..1.4)],
                ),
            }
        }
    }
}

/// One object of an uncut scene, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub shape: Shape,
    /// Full box sizes along the local axes.
    pub extents: [f64; 3],
    pub center: Vector3<f64>,
    pub yaw: f64,
    /// Index of the supporting object, if the object rests on another.
    pub support: Option<usize>,
    pub points: Vec<Vector3<f64>>,
}

/// An uncut synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub num_classes: usize,
    pub objects: Vec<SceneObject>,
}

fn sample_surface<R: Rng + ?Sized>(rng: &mut R, shape: Shape, ext: [f64; 3], n: usize) -> Vec<Vector3<f64>> {
    let [a, b, c] = ext;
    let (ha, hb, hc) = (a / 2.0, b / 2.0, c / 2.0);
    let mut u = || rng.random_range(-1.0..1.0);
    let mut out = Vec::with_capacity(n);
    match shape {
        Shape::Plane => {
            for _ in 0..n {
                out.push(Vector3::new(ha * u(), hb * u(), 0.0));
            }
        }
        Shape::Box => {
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let mut pick = (u() + 1.0) / 2.0 * total;
                let mut face = 0;
                while face < 5 && pick > areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                let (s, t) = (u(), u());
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                out.push(match face / 2 {
                    0 => Vector3::new(sign * ha, hb * s, hc * t),
                    1 => Vector3::new(ha * s, sign * hb, hc * t),
                    _ => Vector3::new(ha * s, hb * t, sign * hc),
                });
            }
        }
        Shape::Sphere => {
            while out.len() < n {
                let v = Vector3::new(u(), u(), u());
                let norm = v.norm();
                if norm > 1e-3 && norm <= 1.0 {
                    out.push(Vector3::new(ha * v.x, hb * v.y, hc * v.z) / norm);
                }
            }
        }
        Shape::Cylinder => {
            let r = ha.max(hb);
            let side = 2.0 * PI * r * c;
            let cap = PI * r * r;
            for _ in 0..n {
                let pick = (u() + 1.0) / 2.0 * (side + 2.0 * cap);
                let phi = PI * u();
                if pick < side {
                    out.push(Vector3::new(ha * phi.cos(), hb * phi.sin(), hc * u()));
                } else {
                    let rho = ((u() + 1.0) / 2.0).sqrt();
                    let z = if pick < side + cap { hc } else { -hc };
                    out.push(Vector3::new(ha * rho * phi.cos(), hb * rho * phi.sin(), z));
                }
            }
        }
    }
    out
}

fn place(local: &[Vector3<f64>], yaw: f64, center: Vector3<f64>) -> Vec<Vector3<f64>> {
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    local.iter().map(|p| rot * p + center).collect()
}

fn half_width_x(ext: [f64; 3], yaw: f64) -> f64 {
    (yaw.cos().abs() * ext[0] + yaw.sin().abs() * ext[1]) / 2.0
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], shape: Shape) -> [f64; 3] {
    let mut j = || 1.0 + rng.random_range(-JITTER..JITTER);
    match shape {
        Shape::Sphere => {
            let s = j();
            base.map(|e| e * s)
        }
        Shape::Cylinder => {
            let s = j();
            [base[0] * s, base[1] * s, base[2] * j()]
        }
        _ => [base[0] * j(), base[1] * j(), base[2] * j()],
    }
}

/// Builder that lays out units (standalone objects or supports carrying
/// items) along the x axis.
struct Layout<'a, R: Rng> {
    rng: &'a mut R,
    cfg: &'a GeneratorConfig,
    cursor: f64,
    objects: Vec<SceneObject>,
}

impl<'a, R: Rng> Layout<'a, R> {
    fn classes(&self, r: Role) -> Vec<usize> {
        (0..self.cfg.num_classes).filter(|&c| role(c) == r).collect()
    }

    fn n_points(&mut self) -> usize {
        let (lo, hi) = self.cfg.points_per_object;
        self.rng.random_range(lo..=hi)
    }

    fn advance(&mut self, half_width: f64, gap: f64) -> f64 {
        let x = self.cursor + gap + half_width;
        self.cursor = x + half_width;
        x
    }

    fn gap(&mut self) -> f64 {
        self.rng.random_range(0.45..1.0)
    }

    fn push_standalone(&mut self, class: usize, ext: [f64; 3], shape: Shape, local: Option<Vec<Vector3<f64>>>, gap: f64) {
        let yaw = self.rng.random_range(0.0..2.0 * PI);
        let x = self.advance(half_width_x(ext, yaw), gap);
        let y = self.rng.random_range(-0.3..0.3);
        let center = Vector3::new(x, y, ext[2] / 2.0);
        let local = local.unwrap_or_else(|| {
            let n = self.n_points();
            sample_surface(self.rng, shape, ext, n)
        });
        self.objects.push(SceneObject {
            class,
            shape,
            extents: ext,
            center,
            yaw,
            support: None,
            points: place(&local, yaw, center),
        });
    }

    fn random_standalone(&mut self) {
        let classes = self.classes(Role::Standalone);
        let class = classes[self.rng.random_range(0..classes.len())];
        let (shape, base) = class_profile(class);
        let ext = jittered(self.rng, base, shape);
        let gap = self.gap();
        self.push_standalone(class, ext, shape, None, gap);
    }

    /// A support with the given items; `items` lists (class, shape, extents).
    fn push_group(&mut self, items: &[(usize, Shape, [f64; 3])], gap_before: f64) {
        let supports = self.classes(Role::Support);
        let class = supports[self.rng.random_range(0..supports.len())];
        let (shape, base) = class_profile(class);
        let mut ext = jittered(self.rng, base, shape);
        ext[0] = ext[0].max(1.0);
        let yaw = if self.rng.random_bool(0.5) { 0.0 } else { PI };
        let x = self.advance(half_width_x(ext, yaw), gap_before);
        let y = self.rng.random_range(-0.3..0.3);
        let height = if shape == Shape::Plane { 0.75 } else { ext[2] };
        let center = Vector3::new(x, y, if shape == Shape::Plane { height } else { height / 2.0 });
        let n = self.n_points();
        let local = sample_surface(self.rng, shape, ext, n);
        let support_idx = self.objects.len();
        self.objects.push(SceneObject {
            class,
            shape,
            extents: ext,
            center,
            yaw,
            support: None,
            points: place(&local, yaw, center),
        });
        let k = items.len().max(1) as f64;
        let slot = ext[0] / k;
        for (s, &(iclass, ishape, iext)) in items.iter().enumerate() {
            let lx = -ext[0] / 2.0 + (s as f64 + 0.5) * slot;
            let ly = self.rng.random_range(-0.2..0.2) * (ext[1] - iext[1]).max(0.0);
            let lift = height + iext[2] / 2.0;
            let offset = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw) * Vector3::new(lx, ly, 0.0);
            let icenter = Vector3::new(center.x + offset.x, center.y + offset.y, lift);
            let iyaw = yaw + (self.rng.random_range(0..4) as f64) * PI / 2.0;
            let n = self.n_points();
            let local = sample_surface(self.rng, ishape, iext, n);
            self.objects.push(SceneObject {
                class: iclass,
                shape: ishape,
                extents: iext,
                center: icenter,
                yaw: iyaw,
                support: Some(support_idx),
                points: place(&local, iyaw, icenter),
            });
        }
    }

    fn random_group(&mut self, max_objects: usize) {
        let n_items = self.rng.random_range(1..=3).min(max_objects.saturating_sub(1));
        let item_classes = self.classes(Role::Item);
        let items: Vec<_> = (0..n_items)
            .map(|_| {
                let class = item_classes[self.rng.random_range(0..item_classes.len())];
                let (shape, base) = class_profile(class);
                let ext = jittered(self.rng, base, shape).map(|e| e.min(MAX_ITEM_SIZE));
                (class, shape, ext)
            })
            .collect();
        let gap = self.gap();
        self.push_group(&items, gap);
    }

    /// Appends random units until exactly `target` objects exist.
    fn fill_to(&mut self, target: usize) {
        while self.objects.len() < target {
            let remaining = target - self.objects.len();
            if remaining >= 2 && self.rng.random_bool(0.45) {
                self.random_group(remaining);
            } else {
                self.random_standalone();
            }
        }
    }

    fn symmetric_group(&mut self) {
        let item_classes = self.classes(Role::Item);
        let class = item_classes[self.rng.random_range(0..item_classes.len())];
        let s = class_profile(class).1[0] * (1.0 + self.rng.random_range(-JITTER..JITTER));
        let s = s.min(MAX_ITEM_SIZE);
        let mut shapes = [Shape::Sphere, Shape::Box, Shape::Cylinder];
        shapes.shuffle(self.rng);
        let items: Vec<_> = shapes.iter().map(|&sh| (class, sh, [s, s, s])).collect();
        self.push_group(&items, GROUP_CLEARANCE);
        self.cursor += GROUP_CLEARANCE;
    }
}

fn centroid_of(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len().max(1) as f64
}

impl Scene {
    /// Scene graph and labeled cloud over the objects `ids` (in that node
    /// order), expressed in the frame given by `transform`. Relations are
    /// derived geometrically among the listed objects only.
    pub fn fragment(&self, ids: &[usize], transform: &RigidTransform) -> Fragment {
        let mut graph = SceneGraph::new(self.num_classes, NUM_RELATIONS);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (node, &o) in ids.iter().enumerate() {
            let obj = &self.objects[o];
            graph
                .add_node(SceneNode::with_extents(
                    o,
                    obj.class,
                    self.num_classes,
                    obj.extents,
                    transform.apply(&obj.center),
                ))
                .expect("generated node is valid");
            points.extend(obj.points.iter().map(|p| transform.apply(p)));
            labels.extend(std::iter::repeat_n(node, obj.points.len()));
        }
        for (a, &oa) in ids.iter().enumerate() {
            for (b, &ob) in ids.iter().enumerate() {
                if a == b {
                    continue;
                }
                let (pa, pb) = (&self.objects[oa], &self.objects[ob]);
                let rel = if pa.support == Some(ob) {
                    Some(REL_SUPPORTED_BY)
                } else if pb.support == Some(oa) {
                    Some(REL_SUPPORTS)
                } else if (pa.center - pb.center).norm() < NEAR_RADIUS {
                    Some(REL_NEAR)
                } else {
                    None
                };
                if let Some(r) = rel {
                    graph.add_edge(a, b, r).expect("generated edge is valid");
                }
            }
        }
        let cloud = PointCloud::new(points, labels).expect("labels match points");
        Fragment { graph, cloud }
    }

    /// All object points in world coordinates.
    pub fn full_cloud(&self) -> PointCloud {
        let ids: Vec<usize> = (0..self.objects.len()).collect();
        self.fragment(&ids, &RigidTransform::identity()).cloud
    }
}

fn validate_generated(scene: &Scene) -> Result<(), SceneGraphError> {
    for o in &scene.objects {
        if o.points.is_empty() || (centroid_of(&o.points) - o.center).amax() > 2.0 {
            return Err(SceneGraphError::InfeasibleConfig("object sampling failed".into()));
        }
    }
    Ok(())
}

fn add_noise<R: Rng + ?Sized>(rng: &mut R, cloud: &PointCloud, sigma: f64) -> PointCloud {
    if sigma <= 0.0 {
        return cloud.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is valid");
    let pts = cloud
        .points()
        .iter()
        .map(|p| p + Vector3::from_fn(|_, _| normal.sample(rng)))
        .collect();
    PointCloud::new(pts, cloud.object_ids().to_vec()).expect("lengths unchanged")
}

fn perturb_object<R: Rng + ?Sized>(rng: &mut R, obj: &mut SceneObject) {
    let budget = rng.random_range(0.5..2.9_f64).to_radians();
    let split: [f64; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let total: f64 = split.iter().sum::<f64>().max(1e-9);
    let [r, p, y] = split.map(|s| budget * s / total);
    let rot = Rotation3::from_euler_angles(r, p, y);
    let shift = Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0);
    for q in obj.points.iter_mut() {
        *q = rot * (*q - obj.center) + obj.center + shift;
    }
    obj.center += shift;
}

/// Builds the uncut scene of a pair: `total` objects of which indices
/// `[total − m_ref, m_src)` end up in both fragments.
fn build_scene<R: Rng>(rng: &mut R, cfg: &GeneratorConfig, m_src: usize, m_ref: usize, n_shared: usize) -> Scene {
    let total = m_src + m_ref - n_shared;
    let shared_start = m_src - n_shared;
    let mut layout = Layout { rng, cfg, cursor: 0.0, objects: Vec::new() };
    match cfg.preset {
        ScenePreset::Standard => layout.fill_to(total),
        ScenePreset::SymmetricStress => {
            layout.fill_to(shared_start);
            if n_shared >= 4 {
                layout.symmetric_group();
            }
            layout.fill_to(total);
        }
        ScenePreset::TwinObjects => {
            let classes = layout.classes(Role::Standalone);
            let class = classes[layout.rng.random_range(0..classes.len())];
            let (shape, base) = class_profile(class);
            let ext = jittered(layout.rng, base, shape).map(|e| e * 1.3);
            let (lo, hi) = cfg.points_per_object;
            let n = layout.rng.random_range(lo..=hi) * 2;
            let local = sample_surface(layout.rng, shape, ext, n);
            if n_shared >= 1 && shared_start >= 1 {
                layout.fill_to(shared_start - 1);
                let gap = layout.gap();
                layout.push_standalone(class, ext, shape, Some(local.clone()), gap);
                let gap = layout.gap();
                layout.push_standalone(class, ext, shape, Some(local), gap);
            }
            layout.fill_to(total);
        }
    }
    Scene { num_classes: cfg.num_classes, objects: layout.objects }
}

/// Generates a synthetic scene pair with exact ground truth. The source
/// fragment stays in the world frame; the reference fragment is moved by
/// `gt_transform`.
pub fn generate_scene_pair(config: &GeneratorConfig, seed: u64) -> Result<ScenePair, SceneGraphError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nlo, nhi) = config.nodes_per_fragment;
    for _ in 0..64 {
        let m_src = rng.random_range(nlo..=nhi);
        let m_ref = rng.random_range(nlo..=nhi);
        let min_m = m_src.min(m_ref);
        let (olo, ohi) = config.overlap;
        let o = if olo == ohi { olo } else { rng.random_range(olo..=ohi) };
        let mut n_shared = ((o * min_m as f64) + 0.5).floor() as usize;
        n_shared = n_shared.min(min_m);
        match config.preset {
            ScenePreset::SymmetricStress if min_m < 4 => continue,
            ScenePreset::SymmetricStress => n_shared = n_shared.max(4),
            ScenePreset::TwinObjects if n_shared == 0 || n_shared == m_src => continue,
            _ => {}
        }
        let mut scene = build_scene(&mut rng, config, m_src, m_ref, n_shared);
        validate_generated(&scene)?;
        let total = scene.objects.len();
        let src_ids: Vec<usize> = (0..m_src).collect();
        let ref_ids: Vec<usize> = (total - m_ref..total).collect();
        let gt_transform = RigidTransform::random(&mut rng, config.max_rotation_deg, config.max_translation);

        let mut src_order = src_ids.clone();
        src_order.shuffle(&mut rng);
        let mut ref_order = ref_ids.clone();
        ref_order.shuffle(&mut rng);
        let src = scene.fragment(&src_order, &RigidTransform::identity());
        if config.dynamic_objects {
            for o in total - m_ref..m_src {
                if rng.random_bool(0.3) {
                    perturb_object(&mut rng, &mut scene.objects[o]);
                }
            }
        }
        let reference = scene.fragment(&ref_order, &gt_transform);
        let src = Fragment { cloud: add_noise(&mut rng, &src.cloud, config.noise_sigma), ..src };
        let reference = Fragment {
            cloud: add_noise(&mut rng, &reference.cloud, config.noise_sigma),
            ..reference
        };
        let mut gt_alignment: Vec<(usize, usize)> = src_order
            .iter()
            .enumerate()
            .filter_map(|(si, o)| ref_order.iter().position(|r| r == o).map(|ri| (si, ri)))
            .collect();
        gt_alignment.sort_unstable();
        let overlap_fraction = gt_alignment.len() as f64 / min_m as f64;
        return ScenePair::new(src, reference, gt_alignment, gt_transform, overlap_fraction);
    }
    Err(SceneGraphError::InfeasibleConfig(
        "could not satisfy preset constraints in 64 attempts".into(),
    ))
}

/// Fragments cut from one uncut scene, for mosaicking.
#[derive(Debug, Clone)]
pub struct MosaicScene {
    pub scene: Scene,
    pub fragments: Vec<Fragment>,
    /// Transform taking fragment `k` into the world frame (= frame 0).
    pub gt_to_world: Vec<RigidTransform>,
}

/// Cuts one scene into `n_fragments` consecutive, overlapping fragments of
/// `objects_per_fragment` objects sharing `shared` objects with their
/// neighbors. Fragment 0 stays in the world frame.
pub fn generate_mosaic(
    config: &GeneratorConfig,
    n_fragments: usize,
    objects_per_fragment: usize,
    shared: usize,
    seed: u64,
) -> Result<MosaicScene, SceneGraphError> {
    config.validate()?;
    if n_fragments < 1 || shared >= objects_per_fragment {
        return Err(SceneGraphError::InfeasibleConfig(
            "need n_fragments ≥ 1 and shared < objects_per_fragment".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = objects_per_fragment - shared;
    let total = objects_per_fragment + step * (n_fragments - 1);
    let cfg = GeneratorConfig { preset: ScenePreset::Standard, ..config.clone() };
    let mut layout = Layout { rng: &mut rng, cfg: &cfg, cursor: 0.0, objects: Vec::new() };
    layout.fill_to(total);
    let scene = Scene { num_classes: cfg.num_classes, objects: layout.objects };
    validate_generated(&scene)?;
    let mut fragments = Vec::new();
    let mut gt_to_world = Vec::new();
    for k in 0..n_fragments {
        let mut ids: Vec<usize> = (k * step..k * step + objects_per_fragment).collect();
        ids.shuffle(&mut rng);
        let to_local = if k == 0 {
            RigidTransform::identity()
        } else {
            RigidTransform::random(&mut rng, config.max_rotation_deg, config.max_translation)
        };
        let frag = scene.fragment(&ids, &to_local);
        let frag = Fragment { cloud: add_noise(&mut rng, &frag.cloud, config.noise_sigma), ..frag };
        fragments.push(frag);
        gt_to_world.push(to_local.inverse());
    }
    Ok(MosaicScene { scene, fragments, gt_to_world })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use proptest::prelude::*;

    #[test]
    fn full_overlap_identity_coincides() {
        let cfg = GeneratorConfig {
            overlap: (1.0, 1.0),
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            nodes_per_fragment: (6, 6),
            ..Default::default()
        };
        let pair = generate_scene_pair(&cfg, 3).unwrap();
        assert_eq!(pair.gt_alignment.len(), 6);
        for &(s, r) in &pair.gt_alignment {
            let a = pair.src.object_points(s);
            let b = pair.reference.object_points(r);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = GeneratorConfig { noise_sigma: 0.01, ..Default::default() };
        assert_eq!(generate_scene_pair(&cfg, 11).unwrap(), generate_scene_pair(&cfg, 11).unwrap());
    }

    #[test]
    fn overlap_count_is_rounded_fraction() {
        let cfg = GeneratorConfig {
            overlap: (0.3, 0.3),
            nodes_per_fragment: (20, 24),
            points_per_object: (10, 12),
            ..Default::default()
        };
        for seed in 0..5 {
            let pair = generate_scene_pair(&cfg, seed).unwrap();
            let m = pair.src.graph.len().min(pair.reference.graph.len());
            assert_eq!(pair.gt_alignment.len(), (0.3 * m as f64).round() as usize);
        }
    }

    #[test]
    fn aligned_nodes_share_class_and_centroid() {
        let pair = generate_scene_pair(&GeneratorConfig::default(), 4).unwrap();
        for &(s, r) in &pair.gt_alignment {
            let (a, b) = (pair.src.graph.node(s), pair.reference.graph.node(r));
            assert_eq!(a.class, b.class);
            assert!((pair.gt_transform.apply(&a.centroid) - b.centroid).norm() < 1e-9);
        }
    }

    #[test]
    fn symmetric_preset_has_automorphic_items() {
        let cfg = GeneratorConfig {
            preset: ScenePreset::SymmetricStress,
            overlap: (0.8, 1.0),
            nodes_per_fragment: (6, 8),
            ..Default::default()
        };
        let pair = generate_scene_pair(&cfg, 2).unwrap();
        let g = &pair.reference.graph;
        let mut found = false;
        for i in 0..g.len() {
            let same: Vec<usize> = (0..g.len())
                .filter(|&j| g.node(j).attributes == g.node(i).attributes)
                .collect();
            if same.len() == 3 {
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn twin_preset_has_clone_outside_overlap() {
        let cfg = GeneratorConfig {
            preset: ScenePreset::TwinObjects,
            overlap: (0.3, 0.5),
            ..Default::default()
        };
        let pair = generate_scene_pair(&cfg, 5).unwrap();
        let aligned: Vec<usize> = pair.gt_alignment.iter().map(|p| p.0).collect();
        let g = &pair.src.graph;
        let twin = (0..g.len()).any(|i| {
            (0..g.len()).any(|j| {
                i != j
                    && aligned.contains(&i)
                    && !aligned.contains(&j)
                    && g.node(i).attributes == g.node(j).attributes
            })
        });
        assert!(twin);
    }

    #[test]
    fn mosaic_fragments_map_back_to_world() {
        let m = generate_mosaic(&GeneratorConfig::default(), 3, 6, 3, 1).unwrap();
        let world = m.scene.full_cloud();
        for (f, t) in m.fragments.iter().zip(&m.gt_to_world) {
            let back = apply_transform(t, &f.cloud);
            for p in back.points().iter().take(20) {
                assert!(world.points().iter().any(|q| (p - q).norm() < 1e-9));
            }
        }
    }

    #[test]
    fn bad_config_is_infeasible() {
        let cfg = GeneratorConfig { overlap: (0.9, 0.2), ..Default::default() };
        assert!(matches!(generate_scene_pair(&cfg, 0), Err(SceneGraphError::InfeasibleConfig(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pairs_satisfy_invariants(seed in any::<u64>(), noise in 0.0f64..0.02) {
            let cfg = GeneratorConfig { noise_sigma: noise, ..Default::default() };
            let pair = generate_scene_pair(&cfg, seed).unwrap();
            pair.validate().unwrap();
            let min_m = pair.src.graph.len().min(pair.reference.graph.len());
            prop_assert!((pair.overlap_fraction - pair.gt_alignment.len() as f64 / min_m as f64).abs() < 1e-9);
            let moved = apply_transform(&pair.gt_transform, &pair.src.cloud);
            prop_assert_eq!(moved.len(), pair.src.cloud.len());
        }
    }
}
