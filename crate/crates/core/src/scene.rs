//! Procedural synthetic scenes with an analytic density/color field, a
//! ray-marching ground-truth renderer, and dataset generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::math::{add, cross, norm, normalize, scale, smoothstep, sub, Mat3, Vec3};
use crate::renderer::composite_ray;
use crate::rng::{CounterRng, Domain, Stream};
use crate::sampler::{clip_to_bounds, OccupancyConfig, OccupancyGrid};

/// Fixed background color composited where transmittance remains; known to
/// the renderer so empty rays have zero loss at convergence.
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// Density falloff shell width as a fraction of the scene extent.
pub const SHELL_FRACTION: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("bad resolution: {0}x{1}")]
    BadResolution(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] crate::image::ImageError),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Axis-aligned slab spanning the scene cross-section (a wall/floor).
    Plane {
        axis: usize,
        offset: f64,
        thickness: f64,
    },
}

impl Primitive {
    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => norm(sub(p, *center)) - radius,
            Primitive::Box { min, max } => {
                let mut q = [0.0; 3];
                for a in 0..3 {
                    let c = 0.5 * (min[a] + max[a]);
                    let h = 0.5 * (max[a] - min[a]);
                    q[a] = (p[a] - c).abs() - h;
                }
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                norm(outside) + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Plane {
                axis,
                offset,
                thickness,
            } => (p[*axis] - offset).abs() - 0.5 * thickness,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Primitive,
    /// Density scale, 1/world-unit.
    pub density: f64,
    /// Albedo RGB in [0,1].
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Falloff shell width in world units.
    pub shell: f64,
}

impl Scene {
    pub fn extent(&self) -> f64 {
        (0..3)
            .map(|a| self.bounds_max[a] - self.bounds_min[a])
            .fold(0.0, f64::max)
    }

    /// Smooth density factor of one primitive: 1 deep inside, 0.5 on the
    /// surface, 0 beyond half a shell outside.
    fn falloff(&self, d: f64) -> f64 {
        smoothstep((0.5 * self.shell - d) / self.shell)
    }

    /// Analytic field: total density and density-weighted albedo.
    pub fn eval(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut density = 0.0;
        let mut color = [0.0; 3];
        for obj in &self.objects {
            let d = obj.shape.signed_distance(p);
            if d >= 0.5 * self.shell {
                continue;
            }
            let rho = obj.density * self.falloff(d);
            density += rho;
            for k in 0..3 {
                color[k] += rho * obj.albedo[k];
            }
        }
        if density > 0.0 {
            for c in color.iter_mut() {
                *c /= density;
            }
        }
        (density, color)
    }

    /// Distance to the nearest primitive surface.
    pub fn min_distance(&self, p: [f64; 3]) -> f64 {
        self.objects
            .iter()
            .map(|o| o.shape.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Occupancy grid matching the analytic field: a cell is occupied if any
    /// probed point in it carries density.
    pub fn voxelize(&self, resolution: usize) -> OccupancyGrid {
        let mut grid = OccupancyGrid::empty(OccupancyConfig {
            resolution,
            ..Default::default()
        });
        let r = resolution;
        let extent = [
            self.bounds_max[0] - self.bounds_min[0],
            self.bounds_max[1] - self.bounds_min[1],
            self.bounds_max[2] - self.bounds_min[2],
        ];
        for cell in 0..r * r * r {
            let z = cell / (r * r);
            let y = (cell / r) % r;
            let x = cell % r;
            let mut occupied = false;
            'probe: for pz in 0..3 {
                for py in 0..3 {
                    for px in 0..3 {
                        let u = [
                            (x as f64 + px as f64 * 0.5) / r as f64,
                            (y as f64 + py as f64 * 0.5) / r as f64,
                            (z as f64 + pz as f64 * 0.5) / r as f64,
                        ];
                        let p = [
                            self.bounds_min[0] + u[0] * extent[0],
                            self.bounds_min[1] + u[1] * extent[1],
                            self.bounds_min[2] + u[2] * extent[2],
                        ];
                        if self.eval(p).0 > 0.0 {
                            occupied = true;
                            break 'probe;
                        }
                    }
                }
            }
            grid.set_cell(cell, occupied);
        }
        grid
    }

    fn validate(&self) {
        for obj in &self.objects {
            assert!(obj.density >= 0.0);
            assert!(obj.albedo.iter().all(|&a| (0.0..=1.0).contains(&a)));
            match &obj.shape {
                Primitive::Sphere { center, radius } => {
                    for a in 0..3 {
                        assert!(center[a] - radius >= self.bounds_min[a]);
                        assert!(center[a] + radius <= self.bounds_max[a]);
                    }
                }
                Primitive::Box { min, max } => {
                    for a in 0..3 {
                        assert!(min[a] >= self.bounds_min[a] && max[a] <= self.bounds_max[a]);
                        assert!(min[a] < max[a]);
                    }
                }
                Primitive::Plane {
                    axis,
                    offset,
                    thickness,
                } => {
                    assert!(*axis < 3);
                    assert!(offset - 0.5 * thickness >= self.bounds_min[*axis]);
                    assert!(offset + 0.5 * thickness <= self.bounds_max[*axis]);
                }
            }
        }
    }
}

fn random_albedo(s: &mut Stream) -> [f64; 3] {
    [
        s.uniform(0.1, 0.95),
        s.uniform(0.1, 0.95),
        s.uniform(0.1, 0.95),
    ]
}

/// Deterministic scene for (preset, seed). Presets: "spheres", "cornell",
/// "clutter".
pub fn generate_scene(preset: &str, seed: u64) -> Result<Scene, SceneError> {
    let bounds_min = [-1.0; 3];
    let bounds_max = [1.0; 3];
    let shell = SHELL_FRACTION * 2.0;
    let rng = CounterRng::new(seed);
    let mut s = rng.stream(Domain::SceneGen, &[0]);
    let objects = match preset {
        "spheres" => {
            let bases: [[f64; 3]; 3] = [[-0.45, -0.2, -0.3], [0.45, -0.15, -0.1], [0.0, 0.4, 0.35]];
            bases
                .iter()
                .map(|b| {
                    let center = [
                        b[0] + s.uniform(-0.08, 0.08),
                        b[1] + s.uniform(-0.08, 0.08),
                        b[2] + s.uniform(-0.08, 0.08),
                    ];
                    let radius = s.uniform(0.25, 0.38);
                    SceneObject {
                        shape: Primitive::Sphere { center, radius },
                        density: s.uniform(8.0, 16.0),
                        albedo: random_albedo(&mut s),
                    }
                })
                .collect()
        }
        "cornell" => {
            let wall = 0.08;
            let mut objects = vec![
                // floor, back wall, two colored side walls; open top and front
                SceneObject {
                    shape: Primitive::Box {
                        min: [-0.85, -0.85, -0.85],
                        max: [0.85, 0.85, -0.77],
                    },
                    density: 60.0,
                    albedo: [0.85, 0.85, 0.85],
                },
                SceneObject {
                    shape: Primitive::Box {
                        min: [-0.85, 0.77, -0.85],
                        max: [0.85, 0.85, 0.85],
                    },
                    density: 60.0,
                    albedo: [0.85, 0.85, 0.85],
                },
                SceneObject {
                    shape: Primitive::Box {
                        min: [-0.85, -0.85, -0.85],
                        max: [-0.85 + wall, 0.85, 0.85],
                    },
                    density: 60.0,
                    albedo: [0.8, 0.15, 0.15],
                },
                SceneObject {
                    shape: Primitive::Box {
                        min: [0.85 - wall, -0.85, -0.85],
                        max: [0.85, 0.85, 0.85],
                    },
                    density: 60.0,
                    albedo: [0.15, 0.8, 0.15],
                },
            ];
            // two interior boxes with seeded placement
            let jx = s.uniform(-0.06, 0.06);
            let jy = s.uniform(-0.06, 0.06);
            objects.push(SceneObject {
                shape: Primitive::Box {
                    min: [-0.5 + jx, -0.1 + jy, -0.77],
                    max: [-0.1 + jx, 0.3 + jy, 0.1],
                },
                density: s.uniform(25.0, 45.0),
                albedo: random_albedo(&mut s),
            });
            let jx = s.uniform(-0.06, 0.06);
            let jy = s.uniform(-0.06, 0.06);
            objects.push(SceneObject {
                shape: Primitive::Box {
                    min: [0.15 + jx, -0.45 + jy, -0.77],
                    max: [0.55 + jx, -0.05 + jy, -0.35],
                },
                density: s.uniform(25.0, 45.0),
                albedo: random_albedo(&mut s),
            });
            objects
        }
        "clutter" => {
            let count = 12;
            (0..count)
                .map(|_| {
                    let kind = s.next_below(2);
                    let center = [
                        s.uniform(-0.6, 0.6),
                        s.uniform(-0.6, 0.6),
                        s.uniform(-0.6, 0.6),
                    ];
                    let shape = if kind == 0 {
                        Primitive::Sphere {
                            center,
                            radius: s.uniform(0.12, 0.3),
                        }
                    } else {
                        let half = [
                            s.uniform(0.1, 0.25),
                            s.uniform(0.1, 0.25),
                            s.uniform(0.1, 0.25),
                        ];
                        Primitive::Box {
                            min: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
                            max: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
                        }
                    };
                    SceneObject {
                        shape,
                        density: s.uniform(6.0, 30.0),
                        albedo: random_albedo(&mut s),
                    }
                })
                .collect()
        }
        other => return Err(SceneError::UnknownPreset(other.to_string())),
    };
    let scene = Scene {
        objects,
        bounds_min,
        bounds_max,
        shell,
    };
    scene.validate();
    Ok(scene)
}

#[derive(Clone, Debug)]
pub struct Camera {
    /// Camera-to-world rotation; columns are the camera basis in world
    /// coordinates.
    pub rotation: Mat3<f64>,
    pub position: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let forward = normalize(sub(target, eye));
        let up = if forward[2].abs() > 0.999 {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let x_cam = normalize(cross(forward, up));
        let y_cam = cross(forward, x_cam);
        Camera {
            rotation: Mat3::from_columns(x_cam, y_cam, forward),
            position: eye,
            focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.focal <= 0.0 {
            return Err(SceneError::DegenerateCamera("focal <= 0".into()));
        }
        let err = self.rotation.orthonormality_error();
        if err >= 1e-6 {
            return Err(SceneError::DegenerateCamera(format!(
                "rotation not orthonormal (err {err:.2e})"
            )));
        }
        Ok(())
    }

    /// World-space ray through the center of pixel (x, y).
    pub fn ray_for_pixel(&self, x: usize, y: usize) -> (Vec3<f64>, Vec3<f64>) {
        let u = (x as f64 + 0.5 - self.cx) / self.focal;
        let v = (y as f64 + 0.5 - self.cy) / self.focal;
        let dir_cam = normalize([u, v, 1.0]);
        (self.position, self.rotation.mul_vec(dir_cam))
    }
}

/// Dense uniform marching on the analytic field through the same compositing
/// kernel the differentiable renderer uses.
pub fn render_ground_truth(
    scene: &Scene,
    camera: &Camera,
    steps_per_ray: usize,
) -> Result<Image, SceneError> {
    assert!(steps_per_ray >= 64, "ground truth needs dense stepping");
    camera.validate()?;
    let bg = [
        BACKGROUND[0] as f64,
        BACKGROUND[1] as f64,
        BACKGROUND[2] as f64,
    ];
    let mut img = Image::new(camera.width, camera.height);
    let width = camera.width;
    img.pixels
        .par_iter_mut()
        .enumerate()
        .for_each(|(idx, px)| {
            let (x, y) = (idx % width, idx / width);
            let (origin, dir) = camera.ray_for_pixel(x, y);
            let ray = clip_to_bounds(origin, dir, scene.bounds_min, scene.bounds_max);
            if ray.t_far <= ray.t_near {
                *px = BACKGROUND;
                return;
            }
            let dt = (ray.t_far - ray.t_near) / steps_per_ray as f64;
            let mut sigma = vec![0.0f64; steps_per_ray];
            let mut color = vec![[0.0f64; 3]; steps_per_ray];
            let delta = vec![dt; steps_per_ray];
            for k in 0..steps_per_ray {
                let t = ray.t_near + (k as f64 + 0.5) * dt;
                let p = add(origin, scale(dir, t));
                let (d, a) = scene.eval(p);
                sigma[k] = d;
                color[k] = a;
            }
            let mut w = vec![0.0; steps_per_ray];
            let mut tr = vec![0.0; steps_per_ray];
            let mut al = vec![0.0; steps_per_ray];
            let (pixel, _) = composite_ray(&sigma, &color, &delta, bg, &mut w, &mut tr, &mut al);
            *px = [pixel[0] as f32, pixel[1] as f32, pixel[2] as f32];
        });
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub preset: String,
    pub seed: u64,
    pub views: Vec<View>,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub background: [f32; 3],
}

impl Dataset {
    pub fn train_view_indices(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].split == Split::Train)
            .collect()
    }

    pub fn val_view_indices(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].split == Split::Val)
            .collect()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let c = &self.views[0].camera;
        (c.width, c.height)
    }

    pub fn n_train_images(&self) -> usize {
        self.train_view_indices().len()
    }
}

/// Cameras on the upper hemisphere looking at the scene center; every 8th
/// view goes to the validation split so held-out poses are evenly
/// distributed around the orbit.
pub fn make_dataset(
    scene: &Scene,
    n_views: usize,
    resolution: (usize, usize),
    seed: u64,
) -> Result<Dataset, SceneError> {
    assert!(n_views >= 8, "need at least 8 views for a 7/8 split");
    let (w, h) = resolution;
    if w == 0 || h == 0 {
        return Err(SceneError::BadResolution(w, h));
    }
    let rng = CounterRng::new(seed);
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let radius = 3.0;
    let focal = 0.9 * w.min(h) as f64;
    let views: Vec<View> = (0..n_views)
        .map(|i| {
            let mut s = rng.stream(Domain::CameraPose, &[i as u64]);
            let azimuth = golden * i as f64 + s.uniform(-0.05, 0.05);
            // elevations cycle through 15..55 degrees
            let elev_deg = 15.0 + 40.0 * ((i % 5) as f64 / 4.0) + s.uniform(-2.0, 2.0);
            let elev = elev_deg.to_radians();
            let eye = [
                radius * elev.cos() * azimuth.cos(),
                radius * elev.cos() * azimuth.sin(),
                radius * elev.sin(),
            ];
            let camera = Camera::look_at(eye, [0.0; 3], focal, w, h);
            let image = render_ground_truth(scene, &camera, 256)?;
            let split = if i % 8 == 0 { Split::Val } else { Split::Train };
            Ok(View {
                camera,
                image,
                split,
            })
        })
        .collect::<Result<_, SceneError>>()?;
    Ok(Dataset {
        preset: String::new(),
        seed,
        views,
        bounds_min: scene.bounds_min,
        bounds_max: scene.bounds_max,
        background: BACKGROUND,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestView {
    /// Camera-to-world rotation, row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
    focal: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    split: Split,
    ppm: String,
    pfm: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    preset: String,
    seed: u64,
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
    background: [f32; 3],
    views: Vec<ManifestView>,
}

/// Writes manifest.json plus one PPM (for viewing) and one PFM (for metrics)
/// per view.
pub fn save_dataset(dataset: &Dataset, dir: &std::path::Path) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut views = Vec::new();
    for (i, view) in dataset.views.iter().enumerate() {
        let ppm = format!("images/view_{i:03}.ppm");
        let pfm = format!("images/view_{i:03}.pfm");
        view.image.write_ppm(&dir.join(&ppm))?;
        view.image.write_pfm(&dir.join(&pfm))?;
        views.push(ManifestView {
            rotation: view.camera.rotation.to_row_major(),
            translation: view.camera.position,
            focal: view.camera.focal,
            cx: view.camera.cx,
            cy: view.camera.cy,
            width: view.camera.width,
            height: view.camera.height,
            split: view.split,
            ppm,
            pfm,
        });
    }
    let manifest = Manifest {
        preset: dataset.preset.clone(),
        seed: dataset.seed,
        bounds_min: dataset.bounds_min,
        bounds_max: dataset.bounds_max,
        background: dataset.background,
        views,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SceneError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &std::path::Path) -> Result<Dataset, SceneError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SceneError::Manifest(e.to_string()))?;
    let mut views = Vec::new();
    for mv in &manifest.views {
        let camera = Camera {
            rotation: Mat3::from_row_major(mv.rotation),
            position: mv.translation,
            focal: mv.focal,
            cx: mv.cx,
            cy: mv.cy,
            width: mv.width,
            height: mv.height,
        };
        camera.validate()?;
        let image = Image::read_pfm(&dir.join(&mv.pfm))?;
        if image.width != mv.width || image.height != mv.height {
            return Err(SceneError::Manifest(format!(
                "image size mismatch for {}",
                mv.pfm
            )));
        }
        views.push(View {
            camera,
            image,
            split: mv.split,
        });
    }
    if views.is_empty() {
        return Err(SceneError::Manifest("no views".into()));
    }
    Ok(Dataset {
        preset: manifest.preset,
        seed: manifest.seed,
        views,
        bounds_min: manifest.bounds_min,
        bounds_max: manifest.bounds_max,
        background: manifest.background,
    })
}
