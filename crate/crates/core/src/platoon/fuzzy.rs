//! Minimal Mamdani inference: triangular terms, min for AND, clipping for
//! implication, max aggregation and centroid defuzzification on a grid.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Triangle {
    pub const fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Membership degree; `a == b` or `b == c` yields a shoulder.
    pub fn degree(&self, x: f64) -> f64 {
        if x < self.a || x > self.c {
            0.0
        } else if x == self.b {
            1.0
        } else if x < self.b {
            (x - self.a) / (self.b - self.a)
        } else {
            (self.c - x) / (self.c - self.b)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    /// (input index, term index) pairs joined by AND.
    pub when: Vec<(usize, usize)>,
    /// Output term index.
    pub then: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzySystem {
    pub inputs: Vec<Vec<Triangle>>,
    pub output: Vec<Triangle>,
    pub rules: Vec<Rule>,
    pub resolution: usize,
}

impl FuzzySystem {
    /// Firing strength of every rule for crisp `x`.
    pub fn firing(&self, x: &[f64]) -> Vec<f64> {
        self.rules
            .iter()
            .map(|r| {
                r.when
                    .iter()
                    .map(|&(i, t)| self.inputs[i][t].degree(x[i]))
                    .fold(1.0, f64::min)
            })
            .collect()
    }

    /// Clip level of each output term after max aggregation.
    pub fn output_levels(&self, x: &[f64]) -> Vec<f64> {
        let mut levels = vec![0.0; self.output.len()];
        for (rule, w) in self.rules.iter().zip(self.firing(x)) {
            levels[rule.then] = f64::max(levels[rule.then], w);
        }
        levels
    }

    /// Centroid of the aggregated output set over [0, 1]; 0 if no rule fires.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let levels = self.output_levels(x);
        let n = self.resolution.max(2);
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..n {
            let z = k as f64 / (n - 1) as f64;
            let mu = self
                .output
                .iter()
                .zip(&levels)
                .map(|(t, &l)| t.degree(z).min(l))
                .fold(0.0, f64::max);
            num += z * mu;
            den += mu;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

pub mod terms {
    use super::Triangle;

    pub const DISTANCE: usize = 0;
    pub const SPEED: usize = 1;
    pub const SPACE: usize = 2;

    pub const NEAR: usize = 0;
    pub const MID: usize = 1;
    pub const FAR: usize = 2;
    pub const SLOWER: usize = 0;
    pub const EQUAL: usize = 1;
    pub const FASTER: usize = 2;
    pub const BLOCKED: usize = 0;
    pub const TIGHT: usize = 1;
    pub const CLEAR: usize = 2;
    pub const LOW: usize = 0;
    pub const MEDIUM: usize = 1;
    pub const HIGH: usize = 2;

    pub const DISTANCE_TERMS: [Triangle; 3] = [
        Triangle::new(0.0, 0.0, 0.5),
        Triangle::new(0.0, 0.5, 1.0),
        Triangle::new(0.5, 1.0, 1.0),
    ];
    pub const SPEED_TERMS: [Triangle; 3] = [
        Triangle::new(-1.0, -1.0, 0.0),
        Triangle::new(-1.0, 0.0, 1.0),
        Triangle::new(0.0, 1.0, 1.0),
    ];
    pub const SPACE_TERMS: [Triangle; 3] = [
        Triangle::new(0.0, 0.0, 0.35),
        Triangle::new(0.15, 0.4, 0.7),
        Triangle::new(0.4, 1.0, 1.0),
    ];
    pub const SCORE_TERMS: [Triangle; 3] = [
        Triangle::new(0.0, 0.0, 0.5),
        Triangle::new(0.25, 0.5, 0.75),
        Triangle::new(0.5, 1.0, 1.0),
    ];
}

/// The shipped merge-gap rule base.
///
/// Inputs: distance to the frontal vehicle normalized by the largest such
/// distance, frontal-minus-candidate speed over 5 m/s clamped to [-1, 1],
/// and nearest background vehicle to the slot over 20 m clamped to [0, 1].
pub fn merge_rule_base() -> FuzzySystem {
    use terms::*;
    let rule = |when: &[(usize, usize)], then| Rule { when: when.to_vec(), then };
    FuzzySystem {
        inputs: vec![DISTANCE_TERMS.to_vec(), SPEED_TERMS.to_vec(), SPACE_TERMS.to_vec()],
        output: SCORE_TERMS.to_vec(),
        rules: vec![
            rule(&[(DISTANCE, NEAR), (SPACE, CLEAR)], HIGH),
            rule(&[(DISTANCE, NEAR), (SPACE, TIGHT)], MEDIUM),
            rule(&[(DISTANCE, MID), (SPACE, CLEAR)], MEDIUM),
            rule(&[(DISTANCE, MID), (SPACE, TIGHT)], LOW),
            rule(&[(DISTANCE, FAR)], LOW),
            rule(&[(SPACE, BLOCKED)], LOW),
            rule(&[(SPEED, EQUAL), (SPACE, CLEAR)], HIGH),
            rule(&[(SPEED, SLOWER)], MEDIUM),
            rule(&[(SPEED, FASTER), (DISTANCE, FAR)], LOW),
            rule(&[(SPEED, FASTER), (DISTANCE, NEAR)], MEDIUM),
        ],
        resolution: 1001,
    }
}
