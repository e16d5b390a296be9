use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Positions and velocities of unit-mass particles in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub pos: Vec<Vec2>,
    pub vel: Vec<Vec2>,
}

/// Reflects particles that left `[-half_width, half_width]^2` back inside and
/// negates the normal velocity. Returns the number of reflections.
pub fn reflect_walls(state: &mut ParticleState, half_width: f64) -> usize {
    let mut hits = 0;
    for (p, v) in state.pos.iter_mut().zip(state.vel.iter_mut()) {
        for d in 0..2 {
            while p[d].abs() > half_width {
                p[d] = if p[d] > half_width {
                    2.0 * half_width - p[d]
                } else {
                    -2.0 * half_width - p[d]
                };
                v[d] = -v[d];
                hits += 1;
            }
        }
    }
    hits
}

/// Kick-drift-kick integrator that carries forces between steps so each
/// step costs one force evaluation.
pub struct Leapfrog<F> {
    force_fn: F,
    forces: Vec<Vec2>,
    pub dt: f64,
    pub walls: Option<f64>,
    pub wall_hits: usize,
    pub steps: usize,
}

impl<F> Leapfrog<F>
where
    F: FnMut(&[Vec2], &mut [Vec2]),
{
    pub fn new(
        state: &ParticleState,
        mut force_fn: F,
        dt: f64,
        walls: Option<f64>,
    ) -> Result<Self> {
        let mut forces = vec![[0.0; 2]; state.pos.len()];
        force_fn(&state.pos, &mut forces);
        check_forces(&forces, 0)?;
        Ok(Leapfrog {
            force_fn,
            forces,
            dt,
            walls,
            wall_hits: 0,
            steps: 0,
        })
    }

    pub fn step(&mut self, state: &mut ParticleState) -> Result<()> {
        let half = 0.5 * self.dt;
        for (v, f) in state.vel.iter_mut().zip(&self.forces) {
            v[0] += half * f[0];
            v[1] += half * f[1];
        }
        for (p, v) in state.pos.iter_mut().zip(&state.vel) {
            p[0] += self.dt * v[0];
            p[1] += self.dt * v[1];
        }
        if let Some(w) = self.walls {
            self.wall_hits += reflect_walls(state, w);
        }
        self.steps += 1;
        (self.force_fn)(&state.pos, &mut self.forces);
        check_forces(&self.forces, self.steps)?;
        for (v, f) in state.vel.iter_mut().zip(&self.forces) {
            v[0] += half * f[0];
            v[1] += half * f[1];
        }
        Ok(())
    }
}

fn check_forces(forces: &[Vec2], step: usize) -> Result<()> {
    if forces.iter().flatten().all(|f| f.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite force at integration step {step}"
        )))
    }
}

/// Single kick-drift-kick step from scratch; walls, if given, are applied
/// after the drift.
pub fn leapfrog_step<F>(
    pos: &[Vec2],
    vel: &[Vec2],
    force_fn: F,
    dt: f64,
    walls: Option<f64>,
) -> Result<(Vec<Vec2>, Vec<Vec2>)>
where
    F: FnMut(&[Vec2], &mut [Vec2]),
{
    let mut state = ParticleState {
        pos: pos.to_vec(),
        vel: vel.to_vec(),
    };
    let mut lf = Leapfrog::new(&state, force_fn, dt, walls)?;
    lf.step(&mut state)?;
    Ok((state.pos, state.vel))
}

/// Classical fourth-order Runge-Kutta step for `dy/dt = f(y)`.
pub fn rk4_step<F>(y: &[f64], mut deriv_fn: F, dt: f64) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    deriv_fn(y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    deriv_fn(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    deriv_fn(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + dt * k3[i];
    }
    deriv_fn(&tmp, &mut k4);
    (0..n)
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_motion_advances_linearly() {
        let (p, v) = leapfrog_step(
            &[[0.0, 0.0]],
            &[[1.0, 0.0]],
            |_, f| f.fill([0.0; 2]),
            0.001,
            None,
        )
        .unwrap();
        assert_eq!(p, vec![[0.001, 0.0]]);
        assert_eq!(v, vec![[1.0, 0.0]]);
    }

    #[test]
    fn wall_reflection_is_elastic() {
        let mut s = ParticleState {
            pos: vec![[4.9, 0.0]],
            vel: vec![[1.0, -0.5]],
        };
        let mut lf = Leapfrog::new(
            &s,
            |_: &[Vec2], f: &mut [Vec2]| f.fill([0.0; 2]),
            0.2,
            Some(5.0),
        )
        .unwrap();
        lf.step(&mut s).unwrap();
        assert!((s.pos[0][0] - 4.9).abs() < 1e-12);
        assert_eq!(s.vel[0], [-1.0, -0.5]);
        assert_eq!(lf.wall_hits, 1);
    }

    #[test]
    fn non_finite_force_reports_step() {
        let mut calls = 0;
        let mut s = ParticleState {
            pos: vec![[0.0, 0.0]],
            vel: vec![[0.0, 0.0]],
        };
        let mut lf = Leapfrog::new(
            &s,
            move |_: &[Vec2], f: &mut [Vec2]| {
                calls += 1;
                f[0] = if calls > 3 {
                    [f64::NAN, 0.0]
                } else {
                    [0.0, 0.0]
                };
            },
            0.1,
            None,
        )
        .unwrap();
        lf.step(&mut s).unwrap();
        lf.step(&mut s).unwrap();
        let err = lf.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn rk4_linear_is_exact() {
        let omega = [1.5, 7.25];
        let mut y = vec![0.25, 3.0];
        for _ in 0..100 {
            y = rk4_step(&y, |_, d| d.copy_from_slice(&omega), 0.01);
        }
        assert!((y[0] - (0.25 + 1.5)).abs() < 1e-9);
        assert!((y[1] - (3.0 + 7.25)).abs() < 1e-9);
    }

    #[test]
    fn rk4_exponential() {
        let mut y = vec![1.0];
        for _ in 0..100 {
            y = rk4_step(&y, |y, d| d[0] = y[0], 0.01);
        }
        assert!(
            (y[0] - std::f64::consts::E).abs() < 1e-9,
            "{}",
            y[0] - std::f64::consts::E
        );
    }
}
