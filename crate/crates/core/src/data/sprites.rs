//! Procedural sprite corpus: articulated stick-figure characters rendered at
//! desk resolution. Each identity owns a palette and body plan; each pose
//! re-articulates the limbs. Deterministic in the corpus seed, per item.

use crate::error::Result;
use crate::imageio::quantize;
use crate::numerics::tensor::Tensor;
use crate::numerics::Rng;

#[derive(Debug, Clone)]
pub struct Sprite {
    /// RGB in [0,1], snapped to the 8-bit grid; background exactly white.
    pub image: Tensor<f32>,
    /// Foreground coverage, exactly 0 or 1.
    pub alpha: Tensor<f32>,
    pub identity_id: usize,
    pub pose_id: usize,
}

#[derive(Debug, Clone)]
struct Identity {
    body: [f32; 3],
    head: [f32; 3],
    limb: [f32; 3],
    accent: [f32; 3],
    head_r: f32,
    torso_a: f32,
    torso_b: f32,
    arm_len: f32,
    limb_r: f32,
    leg_len: f32,
}

impl Identity {
    fn palette(&self) -> [f32; 12] {
        let mut p = [0.0; 12];
        p[..3].copy_from_slice(&self.body);
        p[3..6].copy_from_slice(&self.head);
        p[6..9].copy_from_slice(&self.limb);
        p[9..].copy_from_slice(&self.accent);
        p
    }
}

struct Pose {
    arm_l: f32,
    arm_r: f32,
    leg_l: f32,
    leg_r: f32,
    dx: f32,
    dy: f32,
}

fn sample_color(rng: &mut Rng) -> [f32; 3] {
    [
        rng.uniform_range(0.12, 0.82) as f32,
        rng.uniform_range(0.12, 0.82) as f32,
        rng.uniform_range(0.12, 0.82) as f32,
    ]
}

fn palettes_distinct(a: &[f32; 12], b: &[f32; 12]) -> bool {
    a.iter().zip(b).any(|(x, y)| (x - y).abs() > 0.1)
}

fn sample_identity(rng: &mut Rng, taken: &[[f32; 12]]) -> Identity {
    loop {
        let id = Identity {
            body: sample_color(rng),
            head: sample_color(rng),
            limb: sample_color(rng),
            accent: sample_color(rng),
            head_r: rng.uniform_range(0.105, 0.145) as f32,
            torso_a: rng.uniform_range(0.10, 0.15) as f32,
            torso_b: rng.uniform_range(0.14, 0.185) as f32,
            arm_len: rng.uniform_range(0.17, 0.235) as f32,
            limb_r: rng.uniform_range(0.028, 0.042) as f32,
            leg_len: rng.uniform_range(0.16, 0.215) as f32,
        };
        let p = id.palette();
        if taken.iter().all(|t| palettes_distinct(&p, t)) {
            return id;
        }
    }
}

fn sample_pose(rng: &mut Rng) -> Pose {
    let side = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
    Pose {
        arm_l: rng.uniform_range(0.25, 1.35) as f32,
        arm_r: rng.uniform_range(0.25, 1.35) as f32 * side as f32,
        leg_l: rng.uniform_range(0.08, 0.45) as f32,
        leg_r: rng.uniform_range(0.08, 0.45) as f32,
        dx: rng.uniform_range(-0.03, 0.03) as f32,
        dy: rng.uniform_range(-0.02, 0.02) as f32,
    }
}

fn shade(c: [f32; 3], k: f32) -> [f32; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Distance from point to segment.
fn seg_dist(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * vx, ay + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

enum Part {
    Capsule { a: (f32, f32), b: (f32, f32), r: f32, color: [f32; 3] },
    Ellipse { c: (f32, f32), ax: f32, by: f32, color: [f32; 3] },
    Circle { c: (f32, f32), r: f32, color: [f32; 3] },
    /// Flat-filled disc with no outline band (eyes, belly accent).
    Dot { c: (f32, f32), r: f32, color: [f32; 3] },
}

impl Part {
    /// Color at a point, darkened inside the outline band of width `ow`.
    fn sample(&self, x: f32, y: f32, ow: f32) -> Option<[f32; 3]> {
        match self {
            Part::Capsule { a, b, r, color } => {
                let d = seg_dist(x, y, a.0, a.1, b.0, b.1);
                if d <= *r {
                    Some(if d > r - ow { shade(*color, 0.3) } else { *color })
                } else {
                    None
                }
            }
            Part::Ellipse { c, ax, by, color } => {
                let q = ((x - c.0) / ax).powi(2) + ((y - c.1) / by).powi(2);
                if q <= 1.0 {
                    let rho = q.sqrt();
                    let band = ow / ax.min(*by);
                    Some(if rho > 1.0 - band { shade(*color, 0.3) } else { *color })
                } else {
                    None
                }
            }
            Part::Circle { c, r, color } => {
                let d = ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt();
                if d <= *r {
                    Some(if d > r - ow { shade(*color, 0.3) } else { *color })
                } else {
                    None
                }
            }
            Part::Dot { c, r, color } => {
                let d = ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt();
                (d <= *r).then_some(*color)
            }
        }
    }
}

fn render(identity: &Identity, pose: &Pose, res: usize) -> (Tensor<f32>, Tensor<f32>) {
    let cx = 0.5 + pose.dx;
    let torso_c = (cx, 0.52 + pose.dy);
    let head_c = (cx, torso_c.1 - identity.torso_b - identity.head_r * 0.82);
    let shoulder_y = torso_c.1 - identity.torso_b * 0.55;
    let hip_y = torso_c.1 + identity.torso_b * 0.72;
    let arm = |side: f32, angle: f32| -> Part {
        let sx = cx + side * identity.torso_a * 0.85;
        let (dx, dy) = (angle.sin() * side, angle.cos());
        Part::Capsule {
            a: (sx, shoulder_y),
            b: (
                sx + dx * identity.arm_len,
                shoulder_y + dy * identity.arm_len,
            ),
            r: identity.limb_r,
            color: identity.limb,
        }
    };
    let leg = |side: f32, angle: f32| -> Part {
        let sx = cx + side * identity.torso_a * 0.45;
        Part::Capsule {
            a: (sx, hip_y),
            b: (
                sx + angle.sin() * side * identity.leg_len,
                hip_y + angle.cos() * identity.leg_len,
            ),
            r: identity.limb_r,
            color: identity.limb,
        }
    };
    let eye_dy = -identity.head_r * 0.15;
    let parts = [
        leg(-1.0, pose.leg_l),
        leg(1.0, pose.leg_r),
        arm(-1.0, pose.arm_l),
        arm(1.0, pose.arm_r),
        Part::Ellipse {
            c: torso_c,
            ax: identity.torso_a,
            by: identity.torso_b,
            color: identity.body,
        },
        Part::Circle {
            c: head_c,
            r: identity.head_r,
            color: identity.head,
        },
        Part::Dot {
            c: (torso_c.0, torso_c.1 + identity.torso_b * 0.1),
            r: identity.torso_a * 0.45,
            color: identity.accent,
        },
        Part::Dot {
            c: (head_c.0 - identity.head_r * 0.38, head_c.1 + eye_dy),
            r: identity.head_r * 0.16,
            color: [0.06, 0.06, 0.09],
        },
        Part::Dot {
            c: (head_c.0 + identity.head_r * 0.38, head_c.1 + eye_dy),
            r: identity.head_r * 0.16,
            color: [0.06, 0.06, 0.09],
        },
    ];

    let ow = 1.1 / res as f32;
    let mut rgb = vec![1.0f32; 3 * res * res];
    let mut alpha = vec![0.0f32; res * res];
    for py in 0..res {
        for px in 0..res {
            let x = (px as f32 + 0.5) / res as f32;
            let y = (py as f32 + 0.5) / res as f32;
            let mut color: Option<[f32; 3]> = None;
            for part in &parts {
                if let Some(c) = part.sample(x, y, ow) {
                    color = Some(c); // later parts draw over earlier ones
                }
            }
            if let Some(c) = color {
                let i = py * res + px;
                rgb[i] = c[0];
                rgb[res * res + i] = c[1];
                rgb[2 * res * res + i] = c[2];
                alpha[i] = 1.0;
            }
        }
    }
    let image = quantize(&Tensor::new(vec![3, res, res], rgb).expect("render shape"));
    let alpha = Tensor::new(vec![1, res, res], alpha).expect("alpha shape");
    (image, alpha)
}

/// Generate `n_identities * poses_per_identity` sprites, deterministic in the
/// seed. Identity genomes come from one derived stream so palettes can be
/// cross-checked; each (identity, pose) rendering draws from its own stream,
/// keeping items independent of generation order.
pub fn generate_sprites(
    n_identities: usize,
    poses_per_identity: usize,
    res: usize,
    seed: u64,
) -> Result<Vec<Sprite>> {
    if n_identities == 0 || poses_per_identity == 0 {
        return Err(crate::error::Error::config("empty sprite corpus requested"));
    }
    if res % 8 != 0 {
        return Err(crate::error::Error::config(format!(
            "sprite resolution {res} must be divisible by 8"
        )));
    }
    let mut id_rng = Rng::derive(seed, 0xC0FFEE);
    let mut identities = Vec::with_capacity(n_identities);
    let mut palettes: Vec<[f32; 12]> = Vec::with_capacity(n_identities);
    for _ in 0..n_identities {
        let id = sample_identity(&mut id_rng, &palettes);
        palettes.push(id.palette());
        identities.push(id);
    }
    let mut sprites = Vec::with_capacity(n_identities * poses_per_identity);
    for (i, identity) in identities.iter().enumerate() {
        for p in 0..poses_per_identity {
            let mut pose_rng = Rng::derive(seed, 1 + (i as u64) * 10_007 + p as u64);
            let pose = sample_pose(&mut pose_rng);
            let (image, alpha) = render(identity, &pose, res);
            sprites.push(Sprite {
                image,
                alpha,
                identity_id: i,
                pose_id: p,
            });
        }
    }
    Ok(sprites)
}
