use super::{
    EnvKind, EnvSpec, ARENA, CLIFF_EDGE, CLIFF_GOAL, CLIFF_LEFT_WALL, MAZE_GOAL,
    WALL_BLOCK,
};

/// Physical state, without distractor noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvState {
    Maze { pos: [f64; 2], vel: [f64; 2] },
    Cliff { x: f64, posture: f64, fallen: bool },
}

impl EnvState {
    pub fn maze(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        EnvState::Maze {
            pos: [x, y],
            vel: [vx, vy],
        }
    }

    pub fn cliff(x: f64, posture: f64) -> Self {
        EnvState::Cliff {
            x,
            posture,
            fallen: false,
        }
    }

    pub(super) fn initial(spec: &EnvSpec) -> Self {
        match spec.kind {
            EnvKind::PointMaze => Self::maze(-0.5, -0.5, 0.0, 0.0),
            EnvKind::CliffWalker1d => Self::cliff(0.0, 1.0),
        }
    }

    pub fn features(&self) -> Vec<f64> {
        match *self {
            EnvState::Maze { pos, vel } => vec![pos[0], pos[1], vel[0], vel[1]],
            EnvState::Cliff { x, posture, .. } => vec![x, posture],
        }
    }

    pub fn fallen(&self) -> bool {
        matches!(self, EnvState::Cliff { fallen: true, .. })
    }

    fn distance(&self, other: &EnvState) -> f64 {
        self.features()
            .iter()
            .zip(other.features())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: EnvState,
    pub reward: f64,
    /// A wall or arena boundary stopped the motion.
    pub collided: bool,
}

pub(super) fn inside_block(x: f64, y: f64) -> bool {
    let [x0, x1, y0, y1] = WALL_BLOCK;
    x > x0 && x < x1 && y > y0 && y < y1
}

/// Move along one axis from `from` to `to`, stopping at the arena edge or the
/// wall block. `other` is the fixed coordinate on the other axis.
fn move_axis(axis: usize, from: f64, to: f64, other: f64) -> (f64, bool) {
    let mut p = to.clamp(-ARENA, ARENA);
    let mut hit = p != to;
    let [x0, x1, y0, y1] = WALL_BLOCK;
    let (lo, hi) = if axis == 0 { (x0, x1) } else { (y0, y1) };
    let (xq, yq) = if axis == 0 { (p, other) } else { (other, p) };
    let crosses = (from <= lo && p > lo) || (from >= hi && p < hi);
    if inside_block(xq, yq) || (crosses && {
        let (olo, ohi) = if axis == 0 { (y0, y1) } else { (x0, x1) };
        other > olo && other < ohi
    }) {
        p = if from <= lo { lo } else { hi };
        hit = true;
    }
    (p, hit)
}

/// Deterministic simulator step shared by the environment and the oracle.
pub fn transition(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Transition {
    let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let dt = spec.dt;
    match *state {
        EnvState::Maze { pos, vel } => {
            let mut next_pos = pos;
            let mut next_vel = vel;
            let mut collided = false;
            if spec.symmetric {
                // Displacement control: the mass moves a/m * dt and stops.
                for axis in 0..2 {
                    let target = next_pos[axis] + a[axis] / spec.mass * dt;
                    let (p, hit) = move_axis(axis, next_pos[axis], target, next_pos[1 - axis]);
                    next_pos[axis] = p;
                    collided |= hit;
                }
                next_vel = [0.0, 0.0];
            } else {
                for axis in 0..2 {
                    let target = next_pos[axis] + vel[axis] * dt;
                    let (p, hit) = move_axis(axis, next_pos[axis], target, next_pos[1 - axis]);
                    next_pos[axis] = p;
                    let v = if hit { 0.0 } else { vel[axis] };
                    collided |= hit;
                    next_vel[axis] = v + (a[axis] / spec.mass - spec.friction * v) * dt;
                }
            }
            let d = ((next_pos[0] - MAZE_GOAL[0]).powi(2) + (next_pos[1] - MAZE_GOAL[1]).powi(2))
                .sqrt();
            Transition {
                next: EnvState::Maze {
                    pos: next_pos,
                    vel: next_vel,
                },
                reward: -d + spec.reward_offset,
                collided,
            }
        }
        EnvState::Cliff { x, posture, fallen } => {
            if fallen {
                let p = posture * (-spec.stiffness * dt).exp();
                Transition {
                    next: EnvState::Cliff {
                        x,
                        posture: p,
                        fallen: true,
                    },
                    reward: spec.reward_offset,
                    collided: false,
                }
            } else {
                let target = x + a[0] / spec.mass * dt;
                let nx = target.max(CLIFF_LEFT_WALL);
                let collided = nx != target;
                if nx > CLIFF_EDGE {
                    let p = posture * (-spec.stiffness * dt).exp();
                    Transition {
                        next: EnvState::Cliff {
                            x: nx,
                            posture: p,
                            fallen: true,
                        },
                        reward: spec.reward_offset,
                            collided,
                    }
                } else {
                    Transition {
                        next: EnvState::Cliff {
                            x: nx,
                            posture,
                            fallen: false,
                        },
                        reward: 1.0 - 0.5 * (nx - CLIFF_GOAL).abs() + spec.reward_offset,
                        collided,
                    }
                }
            }
        }
    }
}

/// Tolerance for accepting a reversed transition.
pub const REVERSE_TOL: f64 = 1e-6;

/// Ground-truth reversed action for a recorded transition `(s, a, s')`:
/// an action `a'` with `step(s', a') == s` to within [`REVERSE_TOL`], or
/// `None` when no such action exists.
pub fn reverse_action_oracle(
    spec: &EnvSpec,
    s: &EnvState,
    _a: &[f64],
    s_next: &EnvState,
) -> Option<Vec<f64>> {
    let candidate: Vec<f64> = match (*s, *s_next) {
        (EnvState::Maze { pos, vel }, EnvState::Maze { pos: p1, vel: v1 }) => {
            if spec.symmetric {
                (0..2).map(|i| (pos[i] - p1[i]) * spec.mass / spec.dt).collect()
            } else {
                // Invert v = v1 + (a'/m - f v1) dt.
                (0..2)
                    .map(|i| spec.mass * ((vel[i] - v1[i]) / spec.dt + spec.friction * v1[i]))
                    .collect()
            }
        }
        (
            EnvState::Cliff {
                x, fallen: false, ..
            },
            EnvState::Cliff {
                x: x1,
                fallen: false,
                ..
            },
        ) => vec![(x - x1) * spec.mass / spec.dt],
        _ => return None,
    };
    if candidate.iter().any(|v| v.abs() > 1.0 + 1e-12) {
        return None;
    }
    let back = transition(spec, s_next, &candidate);
    (back.next.distance(s) <= REVERSE_TOL).then_some(candidate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetric() -> EnvSpec {
        EnvSpec {
            symmetric: true,
            friction: 0.0,
            ..EnvSpec::point_maze()
        }
    }

    #[test]
    fn symmetric_reverse_is_negated_action() {
        let spec = symmetric();
        let s = EnvState::maze(0.5, 0.4, 0.0, 0.0);
        let a = [0.7, -0.3];
        let s1 = transition(&spec, &s, &a).next;
        let rev = reverse_action_oracle(&spec, &s, &a, &s1).unwrap();
        assert!((rev[0] + 0.7).abs() < 1e-9 && (rev[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn wall_collision_with_momentum_is_not_reversible() {
        let spec = EnvSpec::point_maze();
        let s = EnvState::maze(0.98, 0.5, 0.5, 0.0);
        let a = [1.0, 0.0];
        let tr = transition(&spec, &s, &a);
        assert!(tr.collided);
        assert!(reverse_action_oracle(&spec, &s, &a, &tr.next).is_none());
    }

    #[test]
    fn clamped_displacement_is_still_state_reversible() {
        let spec = symmetric();
        let s = EnvState::maze(0.98, 0.5, 0.0, 0.0);
        let tr = transition(&spec, &s, &[1.0, 0.0]);
        assert!(tr.collided);
        let rev = reverse_action_oracle(&spec, &s, &[1.0, 0.0], &tr.next).unwrap();
        assert!((rev[0] + 0.2).abs() < 1e-9);
    }

    #[test]
    fn cliff_crossing_is_not_reversible() {
        let spec = EnvSpec::cliff_walker();
        let s = EnvState::cliff(0.95, 1.0);
        let a = [1.0];
        let s1 = transition(&spec, &s, &a).next;
        assert!(s1.fallen());
        assert!(reverse_action_oracle(&spec, &s, &a, &s1).is_none());
    }

    #[test]
    fn cliff_safe_band_reverses() {
        let spec = EnvSpec::cliff_walker();
        let s = EnvState::cliff(0.2, 1.0);
        let s1 = transition(&spec, &s, &[0.4]).next;
        let rev = reverse_action_oracle(&spec, &s, &[0.4], &s1).unwrap();
        assert!((rev[0] + 0.4).abs() < 1e-9);
    }

    #[test]
    fn frictional_inversion_verified_by_resimulation() {
        // With friction the oracle inverts the velocity update; the position
        // also returns only when the forward step reversed the velocity.
        let spec = EnvSpec {
            friction: 0.5,
            ..EnvSpec::point_maze()
        };
        let v = [0.3, -0.2];
        let dt = spec.dt;
        // Choose a so that v1 = -v: -v = v + (a - f v) dt.
        let a: Vec<f64> = v.iter().map(|&vi| (-2.0 * vi / dt + spec.friction * vi) * spec.mass).collect();
        let a: Vec<f64> = a.iter().map(|x| x / 10.0).collect();
        // Scale the velocity down so the action stays in bounds.
        let v = [v[0] / 10.0, v[1] / 10.0];
        let s = EnvState::maze(0.5, 0.5, v[0], v[1]);
        let s1 = transition(&spec, &s, &a).next;
        let rev = reverse_action_oracle(&spec, &s, &a, &s1).expect("reversible");
        let back = transition(&spec, &s1, &rev).next;
        assert!(back.distance(&s) < REVERSE_TOL);

        // A generic transition with friction is not reversible.
        let s = EnvState::maze(0.5, 0.5, 0.1, 0.0);
        let s1 = transition(&spec, &s, &[0.5, 0.5]).next;
        assert!(reverse_action_oracle(&spec, &s, &[0.5, 0.5], &s1).is_none());
    }

    #[test]
    fn block_stops_motion() {
        let spec = symmetric();
        let s = EnvState::maze(-0.15, -0.5, 0.0, 0.0);
        let tr = transition(&spec, &s, &[1.0, 0.0]);
        assert!(tr.collided);
        match tr.next {
            EnvState::Maze { pos, .. } => assert_eq!(pos[0], WALL_BLOCK[0]),
            _ => unreachable!(),
        }
    }
}
