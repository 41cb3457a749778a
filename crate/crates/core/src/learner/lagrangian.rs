use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// `|integral| <= integral_limit`.
    pub integral_limit: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64, integral_limit: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral_limit,
        }
    }

    /// Integral-only controller: proportional and derivative terms removed.
    pub fn integral_only(self) -> Self {
        Self {
            kp: 0.0,
            kd: 0.0,
            ..self
        }
    }
}

/// How the multiplier evolves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaMode {
    #[default]
    Pid,
    /// Held at zero forever.
    Zero,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LagrangianState {
    pub lambda: f64,
    pub integral_delta: f64,
    pub prev_delta: f64,
    pub iteration: u64,
}

impl LagrangianState {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda: lambda.max(0.0),
            ..Self::default()
        }
    }

    /// One PID step on the constraint violation `delta`.
    pub fn pid_update(&mut self, delta: f64, gains: &PidGains) {
        let lim = gains.integral_limit.abs();
        self.integral_delta = (self.integral_delta + delta).clamp(-lim, lim);
        let derivative = delta - self.prev_delta;
        let raw = gains.kp * delta + gains.ki * self.integral_delta + gains.kd * derivative;
        self.lambda = raw.max(0.0);
        self.prev_delta = delta;
        self.iteration += 1;
    }

    pub fn update(&mut self, delta: f64, gains: &PidGains, mode: LambdaMode) {
        match mode {
            LambdaMode::Pid => self.pid_update(delta, gains),
            LambdaMode::Zero => {
                self.lambda = 0.0;
                self.prev_delta = delta;
                self.iteration += 1;
            }
            LambdaMode::Fixed(v) => {
                self.lambda = v.max(0.0);
                self.prev_delta = delta;
                self.iteration += 1;
            }
        }
    }
}
