//! Procedural street scenes written in the SemanticKITTI directory layout.
//!
//! Scenes are ray-cast from a 64-beam spinning sensor and a forward camera
//! against a ground plane, boxes and spheres. Point labels use raw
//! SemanticKITTI IDs and the camera label image uses raw CityScapes IDs, so
//! generated data goes through the same remapping as real data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::{
    write_calib, write_image, write_label_image, write_label_words, write_scan, CalibrationSet,
    LabelRaster, Point, PointCloud, RgbRaster,
};

pub const SENSOR_HEIGHT: f64 = 1.73;
const KITTI_FOCAL: f64 = 721.5377;
const KITTI_WIDTH: f64 = 1242.0;
const CITY_SKY: u16 = 23;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub beams: usize,
    pub pitch_up: f64,
    pub pitch_down: f64,
    /// Horizontal step between firings, degrees.
    pub azimuth_step: f64,
    pub max_range: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Fraction of camera label pixels replaced by a nearby pixel's label.
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            beams: 64,
            pitch_up: 2.0,
            pitch_down: -24.8,
            azimuth_step: 0.16,
            max_range: 80.0,
            image_width: 1242,
            image_height: 375,
            label_noise: 0.05,
        }
    }
}

impl SynthConfig {
    /// Reduced setup for fast fixtures: full beam count, coarser firing and
    /// a half-size camera.
    pub fn small() -> Self {
        Self {
            azimuth_step: 0.3,
            image_width: 621,
            image_height: 188,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Material {
    Car,
    Bicycle,
    Motorcycle,
    Truck,
    Bus,
    Person,
    Bicyclist,
    Motorcyclist,
    Road,
    LaneMarking,
    Parking,
    Sidewalk,
    Building,
    Fence,
    Vegetation,
    Trunk,
    Terrain,
    Pole,
    Sign,
    OtherObject,
}

impl Material {
    /// (SemanticKITTI raw ID, CityScapes raw ID)
    fn ids(self) -> (u16, u16) {
        match self {
            Self::Car => (10, 26),
            Self::Bicycle => (11, 33),
            Self::Motorcycle => (15, 32),
            Self::Truck => (18, 27),
            Self::Bus => (13, 28),
            Self::Person => (30, 24),
            Self::Bicyclist => (31, 25),
            Self::Motorcyclist => (32, 25),
            Self::Road => (40, 7),
            Self::LaneMarking => (60, 7),
            Self::Parking => (44, 9),
            Self::Sidewalk => (48, 8),
            Self::Building => (50, 11),
            Self::Fence => (51, 13),
            Self::Vegetation => (70, 21),
            Self::Trunk => (71, 21),
            Self::Terrain => (72, 22),
            Self::Pole => (80, 17),
            Self::Sign => (81, 20),
            Self::OtherObject => (99, 4),
        }
    }

    fn color(self) -> [f32; 3] {
        match self {
            Self::Car => [0.15, 0.2, 0.6],
            Self::Bicycle => [0.6, 0.1, 0.45],
            Self::Motorcycle => [0.85, 0.4, 0.1],
            Self::Truck => [0.75, 0.75, 0.8],
            Self::Bus => [0.9, 0.8, 0.1],
            Self::Person => [0.85, 0.1, 0.15],
            Self::Bicyclist | Self::Motorcyclist => [0.95, 0.3, 0.6],
            Self::Road => [0.3, 0.3, 0.32],
            Self::LaneMarking => [0.95, 0.95, 0.95],
            Self::Parking => [0.45, 0.4, 0.45],
            Self::Sidewalk => [0.6, 0.55, 0.6],
            Self::Building => [0.55, 0.35, 0.25],
            Self::Fence => [0.5, 0.5, 0.3],
            Self::Vegetation => [0.15, 0.5, 0.12],
            Self::Trunk => [0.35, 0.25, 0.1],
            Self::Terrain => [0.55, 0.6, 0.3],
            Self::Pole => [0.8, 0.8, 0.6],
            Self::Sign => [0.95, 0.85, 0.0],
            Self::OtherObject => [0.2, 0.6, 0.6],
        }
    }

    fn intensity(self) -> f32 {
        match self {
            Self::Car | Self::Truck | Self::Bus => 0.35,
            Self::Bicycle | Self::Motorcycle => 0.25,
            Self::Person | Self::Bicyclist | Self::Motorcyclist => 0.2,
            Self::Road | Self::Parking => 0.1,
            Self::LaneMarking => 0.7,
            Self::Sidewalk => 0.22,
            Self::Building => 0.3,
            Self::Fence => 0.4,
            Self::Vegetation | Self::Trunk => 0.05,
            Self::Terrain => 0.15,
            Self::Pole => 0.5,
            Self::Sign => 0.9,
            Self::OtherObject => 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Cuboid { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    material: Material,
    instance: u16,
}

#[derive(Debug, Clone)]
struct Layout {
    road_half: f64,
    sidewalk: f64,
    parking: Option<(f64, f64)>,
    objects: Vec<Object>,
}

impl Shape {
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < 1e-12 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                    if t0 > t1 {
                        return None;
                    }
                }
                (t0 > 1e-6).then_some(t0)
            }
            Shape::Sphere { center, radius } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 1e-6).then_some(t)
            }
        }
    }
}

const GROUND: f64 = -SENSOR_HEIGHT;

fn cuboid(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Shape {
    Shape::Cuboid {
        min: [x.0, y.0, z.0],
        max: [x.1, y.1, z.1],
    }
}

/// Box standing on the ground, centered at `(x, y)`.
fn standing(x: f64, y: f64, len: f64, width: f64, height: f64) -> Shape {
    cuboid(
        (x - len / 2.0, x + len / 2.0),
        (y - width / 2.0, y + width / 2.0),
        (GROUND, GROUND + height),
    )
}

impl Layout {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let road_half = rng.gen_range(3.5..6.0);
        let sidewalk = rng.gen_range(2.0..3.5);
        let curb = road_half + sidewalk;
        let mut objects = Vec::new();
        let mut instance = 1u16;
        let mut push = |objects: &mut Vec<Object>, shape, material| {
            objects.push(Object { shape, material, instance });
            instance += 1;
        };

        // building rows with gaps, trees in some gaps
        for side in [-1.0f64, 1.0] {
            let offset = curb + rng.gen_range(0.5..4.0);
            let mut x = rng.gen_range(-30.0..-10.0);
            while x < 80.0 {
                let len = rng.gen_range(8.0..25.0);
                if rng.gen_bool(0.75) {
                    let height = rng.gen_range(5.0..15.0);
                    let (y0, y1) = if side > 0.0 { (offset, offset + 10.0) } else { (-offset - 10.0, -offset) };
                    push(&mut objects, cuboid((x, x + len), (y0, y1), (GROUND, GROUND + height)), Material::Building);
                } else {
                    let mut tx = x + 2.0;
                    while tx < x + len - 2.0 {
                        let ty = side * (offset + rng.gen_range(0.5..3.0));
                        let trunk = rng.gen_range(1.5..2.5);
                        push(&mut objects, standing(tx, ty, 0.35, 0.35, trunk), Material::Trunk);
                        let r = rng.gen_range(1.2..2.5);
                        push(
                            &mut objects,
                            Shape::Sphere { center: [tx, ty, GROUND + trunk + r * 0.8], radius: r },
                            Material::Vegetation,
                        );
                        tx += rng.gen_range(4.0..7.0);
                    }
                    if rng.gen_bool(0.6) {
                        let fy = side * (curb + 0.3);
                        push(
                            &mut objects,
                            cuboid((x, x + len), (fy - 0.05, fy + 0.05), (GROUND, GROUND + 1.2)),
                            Material::Fence,
                        );
                    }
                }
                x += len + rng.gen_range(1.0..6.0);
            }
        }

        // always at least one fence segment in front
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let fx = rng.gen_range(6.0..15.0);
        let fy = side * (curb + 0.3);
        push(&mut objects, cuboid((fx, fx + rng.gen_range(4.0..10.0)), (fy - 0.05, fy + 0.05), (GROUND, GROUND + 1.2)), Material::Fence);

        // vehicles on the road
        let lane = road_half / 2.0;
        for _ in 0..rng.gen_range(3..7) {
            let y = if rng.gen_bool(0.5) { lane } else { -lane } + rng.gen_range(-0.4..0.4);
            let x = rng.gen_range(5.0..40.0);
            push(&mut objects, standing(x, y, rng.gen_range(3.8..4.8), rng.gen_range(1.6..1.9), rng.gen_range(1.4..1.6)), Material::Car);
        }
        for _ in 0..rng.gen_range(1..3) {
            let y = if rng.gen_bool(0.5) { lane } else { -lane };
            let x = rng.gen_range(12.0..45.0);
            push(&mut objects, standing(x, y, rng.gen_range(6.0..9.0), 2.4, rng.gen_range(2.8..3.5)), Material::Truck);
        }
        {
            let y = if rng.gen_bool(0.5) { lane } else { -lane };
            let x = rng.gen_range(15.0..45.0);
            push(&mut objects, standing(x, y, 11.0, 2.5, 3.2), Material::Bus);
        }
        for _ in 0..rng.gen_range(1..3) {
            let y = rng.gen_range(-road_half + 0.8..road_half - 0.8);
            let x = rng.gen_range(6.0..30.0);
            push(&mut objects, standing(x, y, 2.0, 0.8, 1.0), Material::Motorcycle);
            push(&mut objects, cuboid((x - 0.4, x + 0.3), (y - 0.3, y + 0.3), (GROUND + 1.0, GROUND + 1.75)), Material::Motorcyclist);
        }

        // sidewalk users and street furniture
        for _ in 0..rng.gen_range(1..3) {
            let y = (road_half + 0.6) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let x = rng.gen_range(5.0..25.0);
            push(&mut objects, standing(x, y, 1.7, 0.5, 0.9), Material::Bicycle);
            if rng.gen_bool(0.7) {
                push(&mut objects, cuboid((x - 0.3, x + 0.3), (y - 0.25, y + 0.25), (GROUND + 0.9, GROUND + 1.75)), Material::Bicyclist);
            }
        }
        for _ in 0..rng.gen_range(2..6) {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = s * rng.gen_range(road_half + 0.8..curb - 0.3);
            let x = rng.gen_range(4.0..30.0);
            push(&mut objects, standing(x, y, 0.5, 0.5, rng.gen_range(1.6..1.9)), Material::Person);
        }
        let mut px = rng.gen_range(4.0..10.0);
        while px < 45.0 {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = s * (curb - 0.3);
            let h = rng.gen_range(2.6..3.6);
            push(&mut objects, standing(px, y, 0.2, 0.2, h), Material::Pole);
            if rng.gen_bool(0.8) {
                push(&mut objects, cuboid((px - 0.15, px - 0.05), (y - 0.6, y + 0.6), (GROUND + h - 1.0, GROUND + h)), Material::Sign);
            }
            px += rng.gen_range(6.0..14.0);
        }
        if rng.gen_bool(0.5) {
            let y = (curb - 0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            push(&mut objects, standing(rng.gen_range(6.0..20.0), y, 0.6, 0.6, 0.9), Material::OtherObject);
        }

        let parking = rng.gen_bool(0.5).then(|| {
            let x = rng.gen_range(8.0..30.0);
            (x, x + rng.gen_range(5.0..12.0))
        });
        Self { road_half, sidewalk, parking, objects }
    }

    fn ground_material(&self, x: f64, y: f64) -> Material {
        let ay = y.abs();
        if ay < self.road_half {
            if ay < 0.08 && x.rem_euclid(6.0) < 3.0 {
                return Material::LaneMarking;
            }
            if let Some((x0, x1)) = self.parking {
                if y > self.road_half - 2.2 && x > x0 && x < x1 {
                    return Material::Parking;
                }
            }
            Material::Road
        } else if ay < self.road_half + self.sidewalk {
            Material::Sidewalk
        } else {
            Material::Terrain
        }
    }

    /// Nearest hit along a unit ray: `(distance, material, instance)`.
    fn cast(&self, o: [f64; 3], d: [f64; 3], max_range: f64) -> Option<(f64, Material, u16)> {
        let mut best: Option<(f64, Material, u16)> = None;
        if d[2] < -1e-9 {
            let t = (GROUND - o[2]) / d[2];
            if t > 0.0 && t <= max_range {
                let m = self.ground_material(o[0] + t * d[0], o[1] + t * d[1]);
                best = Some((t, m, 0));
            }
        }
        for obj in &self.objects {
            if let Some(t) = obj.shape.hit(o, d) {
                if t <= max_range && best.map_or(true, |b| t < b.0) {
                    best = Some((t, obj.material, obj.instance));
                }
            }
        }
        best
    }
}

/// One generated frame.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Points with raw SemanticKITTI semantic IDs attached as labels.
    pub cloud: PointCloud,
    pub instances: Vec<u16>,
    pub image: RgbRaster,
    /// Raw CityScapes IDs per pixel.
    pub image_labels: LabelRaster,
    pub calib: CalibrationSet,
}

impl Scene {
    /// Label words as stored in `.label` files.
    pub fn label_words(&self) -> Vec<u32> {
        let sem = self.cloud.labels.as_deref().unwrap_or(&[]);
        sem.iter()
            .zip(&self.instances)
            .map(|(&s, &i)| (i as u32) << 16 | s as u32)
            .collect()
    }
}

/// KITTI-like camera model scaled to `width × height`.
pub fn synth_calib(width: u32, height: u32) -> CalibrationSet {
    let f = KITTI_FOCAL * width as f64 / KITTI_WIDTH;
    let proj = [
        [f, 0.0, width as f64 / 2.0, 0.0],
        [0.0, f, height as f64 * 0.46, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let tr = [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, -0.08],
        [1.0, 0.0, 0.0, -0.27],
    ];
    CalibrationSet::new(proj, tr).with_image_size(width, height)
}

pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    if cfg.beams < 2 || cfg.azimuth_step <= 0.0 || cfg.image_width == 0 || cfg.image_height == 0 {
        return Err(Error::contract(format!("invalid synthetic sensor setup {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::random(&mut rng);

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    let firings = (360.0 / cfg.azimuth_step).round() as usize;
    for b in 0..cfg.beams {
        let pitch = cfg.pitch_up - (cfg.pitch_up - cfg.pitch_down) * b as f64 / (cfg.beams - 1) as f64;
        let (sp, cp) = pitch.to_radians().sin_cos();
        for k in 0..firings {
            let yaw = (-180.0 + k as f64 * cfg.azimuth_step + rng.gen_range(-0.02..0.02)).to_radians();
            let d = [cp * yaw.cos(), cp * yaw.sin(), sp];
            let Some((t, m, inst)) = layout.cast([0.0; 3], d, cfg.max_range) else {
                continue;
            };
            if rng.gen_bool(0.02) {
                continue;
            }
            let t = t + rng.gen_range(-0.01..0.01);
            let i = (m.intensity() + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0);
            points.push(Point::new((t * d[0]) as f32, (t * d[1]) as f32, (t * d[2]) as f32, i));
            labels.push(m.ids().0);
            instances.push(inst);
        }
    }
    let cloud = PointCloud::from_points(points).with_labels(labels)?;

    let (w, h) = (cfg.image_width, cfg.image_height);
    let calib = synth_calib(w, h);
    let p = calib.proj;
    let (f, cx, cy) = (p[0][0], p[0][2], p[1][2]);
    let origin = [0.27, 0.0, -0.08];
    let mut image = RgbRaster::new(w, h);
    let mut image_labels = LabelRaster::filled(w, h, CITY_SKY);
    for v in 0..h {
        for u in 0..w {
            let (a, bb) = ((u as f64 + 0.5 - cx) / f, (v as f64 + 0.5 - cy) / f);
            // camera (right, down, forward) to LiDAR (forward, left, up)
            let n = (1.0 + a * a + bb * bb).sqrt();
            let d = [1.0 / n, -a / n, -bb / n];
            let jitter = rng.gen_range(-0.03f32..0.03);
            match layout.cast(origin, d, 200.0) {
                Some((t, m, _)) => {
                    let shade = 1.0 - (t / 250.0) as f32;
                    let c = m.color().map(|x| (x * shade + jitter).clamp(0.0, 1.0));
                    image.set_pixel(u, v, c);
                    image_labels.data[(v * w + u) as usize] = m.ids().1;
                }
                None => {
                    let sky = [0.55, 0.7, 0.95].map(|x: f32| (x - 0.2 * v as f32 / h as f32 + jitter).clamp(0.0, 1.0));
                    image.set_pixel(u, v, sky);
                }
            }
        }
    }
    if cfg.label_noise > 0.0 {
        let src = image_labels.clone();
        for v in 0..h {
            for u in 0..w {
                if rng.gen_bool(cfg.label_noise.min(1.0)) {
                    let su = (u as i64 + rng.gen_range(-3..=3)).clamp(0, w as i64 - 1) as u32;
                    let sv = (v as i64 + rng.gen_range(-3..=3)).clamp(0, h as i64 - 1) as u32;
                    image_labels.data[(v * w + u) as usize] = src.get(su, sv);
                }
            }
        }
    }

    Ok(Scene { cloud, instances, image, image_labels, calib })
}

/// Writes `frames` scenes as sequence `seq` under `root`:
/// `sequences/<seq>/{velodyne,labels,image_2,calib.txt}` plus camera label
/// maps in `image_labels/<seq>/`.
pub fn write_sequence(root: &Path, seq: &str, frames: usize, seed: u64, cfg: &SynthConfig) -> Result<()> {
    let dir = root.join("sequences").join(seq);
    let label_dir = root.join("image_labels").join(seq);
    for d in ["velodyne", "labels", "image_2"].map(|s| dir.join(s)).into_iter().chain([label_dir.clone()]) {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_calib(dir.join("calib.txt"), &synth_calib(cfg.image_width, cfg.image_height))?;
    for i in 0..frames {
        let scene = generate(frame_seed(seed, seq, i), cfg)?;
        let id = format!("{i:06}");
        write_scan(dir.join("velodyne").join(format!("{id}.bin")), &scene.cloud.points)?;
        write_label_words(dir.join("labels").join(format!("{id}.label")), &scene.label_words())?;
        write_image(dir.join("image_2").join(format!("{id}.png")), &scene.image)?;
        write_label_image(label_dir.join(format!("{id}.png")), &scene.image_labels)?;
    }
    Ok(())
}

/// Scene seed of frame `index` of a written sequence.
pub fn frame_seed(seed: u64, seq: &str, index: usize) -> u64 {
    let s = crate::models::fnv1a(seq.as_bytes());
    (seed ^ s).wrapping_add(index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
