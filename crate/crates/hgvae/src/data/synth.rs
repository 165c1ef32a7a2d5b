//! Synthetic motion generator: forward kinematics over the skeleton tree,
//! driven by smooth per-joint oscillation programs. Bones stay rigid by
//! construction and everything is deterministic per seed.
//!
//! Class identity lives in the (class-fixed) base pose and in the
//! oscillation frequency; every sequence gets its own per-joint phases
//! and amplitude scales, so sequences are distinct motions rather than
//! copies of a class prototype. Frequencies are integer cycles per
//! reference window, which keeps oscillations exactly out of the DC
//! coefficient where the base pose separates the classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{MotionDataset, SkeletonSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

type Mat3 = [[Real; 3]; 3];

fn rot_x(a: Real) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_z(a: Real) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &[Real; 3]) -> [Real; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..3).map(|k| a[i][k] * v[k]).sum();
    }
    out
}

/// Frames per oscillation reference window. Frequencies are integer
/// cycles per this many frames, so sequences of any length sample the
/// same motion rate (a 75-frame sequence spans 1.5 windows).
const REF_PERIOD_FRAMES: Real = 50.0;

const TWO_PI: Real = 2.0 * std::f64::consts::PI as Real;

/// Class-level oscillation program for one joint axis: a base angle plus
/// a fundamental and a second harmonic whose phases and amplitude scale
/// are drawn per sequence.
#[derive(Clone)]
struct AxisProgram {
    base: Real,
    amp: Real,
    amp2: Real,
    freq: Real,
}

impl AxisProgram {
    fn eval(&self, tau: Real, jitter: &AxisJitter) -> Real {
        self.base
            + jitter.amp_scale
                * (self.amp * (TWO_PI * self.freq * tau + jitter.phase1).sin()
                    + self.amp2 * (2.0 * TWO_PI * self.freq * tau + jitter.phase2).sin())
    }
}

/// Per-sequence draw for one joint axis.
struct AxisJitter {
    phase1: Real,
    phase2: Real,
    amp_scale: Real,
}

struct ClassProgram {
    /// Two rotation axes (about x and z) per joint.
    joints: Vec<[AxisProgram; 2]>,
    root_sway: [AxisProgram; 3],
}

fn class_program(spec: &SkeletonSpec, class: usize, seed: u64) -> ClassProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1)),
    );
    // integer cycles per reference window: zero leakage into the DC bin
    let freq = (class + 1) as Real;
    let mut joints = Vec::with_capacity(spec.joint_count());
    for _ in 0..spec.joint_count() {
        let mut axis = || {
            let amp = rng.gen_range(0.15..0.45);
            AxisProgram {
                base: rng.gen_range(-0.45..0.45),
                amp,
                amp2: 0.3 * amp,
                freq,
            }
        };
        joints.push([axis(), axis()]);
    }
    let mut sway = |amp: Real| AxisProgram {
        base: 0.0,
        amp,
        amp2: 0.3 * amp,
        freq,
    };
    ClassProgram {
        joints,
        root_sway: [sway(0.03), sway(0.02), sway(0.03)],
    }
}

fn draw_axis_jitter(rng: &mut ChaCha8Rng) -> AxisJitter {
    AxisJitter {
        phase1: rng.gen_range(0.0..TWO_PI),
        phase2: rng.gen_range(0.0..TWO_PI),
        amp_scale: rng.gen_range(0.5..1.5),
    }
}

/// Generate `count` labeled sequences of `timepoints` frames. Classes are
/// assigned round-robin so every class is populated.
pub fn synthesize_motions(
    spec: &SkeletonSpec,
    count: usize,
    classes: usize,
    timepoints: usize,
    seed: u64,
) -> Result<MotionDataset> {
    if count == 0 || classes == 0 || timepoints == 0 {
        return Err(Error::InvalidArgument(
            "synthesize_motions: count, classes and timepoints must be positive".into(),
        ));
    }
    spec.validate()?;
    let j = spec.joint_count();
    let programs: Vec<ClassProgram> = (0..classes).map(|c| class_program(spec, c, seed)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sequences = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let prog = &programs[class];
        let joint_jitter: Vec<[AxisJitter; 2]> = (0..j)
            .map(|_| [draw_axis_jitter(&mut rng), draw_axis_jitter(&mut rng)])
            .collect();
        let root_jitter: [AxisJitter; 3] = [
            draw_axis_jitter(&mut rng),
            draw_axis_jitter(&mut rng),
            draw_axis_jitter(&mut rng),
        ];
        let mut data = vec![0.0; j * 3 * timepoints];
        for t in 0..timepoints {
            let tau = t as Real / REF_PERIOD_FRAMES;
            let root = [
                prog.root_sway[0].eval(tau, &root_jitter[0]),
                0.9 + prog.root_sway[1].eval(tau, &root_jitter[1]),
                prog.root_sway[2].eval(tau, &root_jitter[2]),
            ];
            let mut glob_rot: Vec<Mat3> = Vec::with_capacity(j);
            let mut glob_pos: Vec<[Real; 3]> = Vec::with_capacity(j);
            for jj in 0..j {
                let noise = |rng: &mut ChaCha8Rng| {
                    let v: f64 = rng.sample(StandardNormal);
                    0.01 * v as Real
                };
                let ax = prog.joints[jj][0].eval(tau, &joint_jitter[jj][0]) + noise(&mut rng);
                let az = prog.joints[jj][1].eval(tau, &joint_jitter[jj][1]) + noise(&mut rng);
                let local = mat_mul(&rot_z(az), &rot_x(ax));
                match spec.parents[jj] {
                    None => {
                        glob_rot.push(local);
                        glob_pos.push(root);
                    }
                    Some(p) => {
                        let bone = [
                            spec.rest_directions[jj][0] * spec.bone_lengths[jj],
                            spec.rest_directions[jj][1] * spec.bone_lengths[jj],
                            spec.rest_directions[jj][2] * spec.bone_lengths[jj],
                        ];
                        let offset = mat_vec(&glob_rot[p], &bone);
                        let pos = [
                            glob_pos[p][0] + offset[0],
                            glob_pos[p][1] + offset[1],
                            glob_pos[p][2] + offset[2],
                        ];
                        glob_rot.push(mat_mul(&glob_rot[p], &local));
                        glob_pos.push(pos);
                    }
                }
            }
            for (jj, pos) in glob_pos.iter().enumerate() {
                for d in 0..3 {
                    data[(jj * 3 + d) * timepoints + t] = pos[d];
                }
            }
        }
        sequences.push(Tensor::new(vec![j, 3, timepoints], data)?);
        labels.push(class);
    }
    MotionDataset::new(sequences, Some(labels), "synthetic")
}
