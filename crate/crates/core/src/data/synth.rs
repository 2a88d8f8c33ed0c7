//! Synthetic students with planted skill structure and forgetting.
//!
//! Each student has a global ability, a per-skill aptitude and a per-skill
//! knowledge level. Knowledge grows with practice, leaks to neighbouring
//! skills in a random skill graph and decays exponentially in wall-clock
//! time with the configured half-life. Responses follow
//! `P(correct) = sigmoid(ability + aptitude[k] + knowledge[k] - difficulty[e])`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog, StudentLog};
use crate::error::{KtError, Result};

const HOUR_MS: f64 = 3_600_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub students: usize,
    pub exercises: usize,
    pub skills: usize,
    /// Probability that two distinct skills are linked in the skill graph.
    pub skill_graph_density: f64,
    /// Knowledge half-life in hours; `inf` disables forgetting.
    pub forgetting_halflife: f64,
    pub seed: u64,
    pub min_length: usize,
    pub max_length: usize,
    /// Knowledge gained on a correct / incorrect attempt.
    pub gain_correct: f64,
    pub gain_incorrect: f64,
    /// Fraction of a gain passed to linked skills.
    pub transfer: f64,
    /// Spread of student ability and of per-skill aptitude.
    pub ability_sd: f64,
    pub aptitude_sd: f64,
    pub difficulty_sd: f64,
    /// Probability of staying on the current skill for the next attempt.
    pub stay_probability: f64,
    /// Mean attempts per study session.
    pub session_length: f64,
    /// Mean gap between attempts inside a session, in minutes.
    pub within_session_gap_minutes: f64,
    /// Mean gap between sessions, in hours.
    pub between_session_gap_hours: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            students: 2000,
            exercises: 100,
            skills: 10,
            skill_graph_density: 0.2,
            forgetting_halflife: 24.0,
            seed: 0,
            min_length: 20,
            max_length: 100,
            gain_correct: 0.5,
            gain_incorrect: 0.2,
            transfer: 0.5,
            ability_sd: 0.8,
            aptitude_sd: 1.0,
            difficulty_sd: 0.8,
            stay_probability: 0.5,
            session_length: 8.0,
            within_session_gap_minutes: 2.0,
            between_session_gap_hours: 24.0,
        }
    }
}

impl SynthConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KtError::Config(format!("synth: {m}")));
        if self.students == 0 {
            return bad("students must be >= 1");
        }
        if self.skills == 0 || self.exercises < self.skills {
            return bad("need exercises >= skills >= 1");
        }
        if !(0.0..=1.0).contains(&self.skill_graph_density) {
            return bad("skill_graph_density outside [0, 1]");
        }
        if !(self.forgetting_halflife > 0.0) {
            return bad("forgetting_halflife must be positive");
        }
        if self.min_length < 1 || self.max_length < self.min_length {
            return bad("need 1 <= min_length <= max_length");
        }
        if !(0.0..=1.0).contains(&self.stay_probability) {
            return bad("stay_probability outside [0, 1]");
        }
        if !(self.session_length >= 1.0)
            || !(self.within_session_gap_minutes > 0.0)
            || !(self.between_session_gap_hours > 0.0)
        {
            return bad("session parameters must be positive");
        }
        for (name, v) in [
            ("ability_sd", self.ability_sd),
            ("aptitude_sd", self.aptitude_sd),
            ("difficulty_sd", self.difficulty_sd),
            ("transfer", self.transfer),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// The hidden structure a log was generated from.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub skill_of: Vec<u32>,
    pub difficulty: Vec<f64>,
    /// Symmetric adjacency of the skill graph.
    pub linked: Vec<Vec<bool>>,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<(InteractionLog, SynthWorld)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (e_count, s_count) = (config.exercises, config.skills);

    let mut slots: Vec<usize> = (0..e_count).collect();
    slots.shuffle(&mut rng);
    let mut skill_of = vec![0u32; e_count];
    for (rank, &e) in slots.iter().enumerate() {
        skill_of[e] = (rank % s_count) as u32;
    }
    let mut members = vec![Vec::new(); s_count];
    for (e, &s) in skill_of.iter().enumerate() {
        members[s as usize].push(e as u32);
    }
    let normal = |sd: f64| Normal::new(0.0, sd).expect("finite sd");
    let difficulty: Vec<f64> = (0..e_count)
        .map(|_| normal(config.difficulty_sd).sample(&mut rng))
        .collect();
    let mut linked = vec![vec![false; s_count]; s_count];
    for a in 0..s_count {
        for b in a + 1..s_count {
            if rng.random::<f64>() < config.skill_graph_density {
                linked[a][b] = true;
                linked[b][a] = true;
            }
        }
    }
    let neighbours: Vec<Vec<usize>> = linked
        .iter()
        .map(|row| (0..s_count).filter(|&b| row[b]).collect())
        .collect();

    let within = Exp::new(1.0 / config.within_session_gap_minutes).expect("positive rate");
    let between = Exp::new(1.0 / config.between_session_gap_hours).expect("positive rate");
    let end_session = 1.0 / config.session_length;
    let decay_per_hour = if config.forgetting_halflife.is_finite() {
        std::f64::consts::LN_2 / config.forgetting_halflife
    } else {
        0.0
    };

    let mut students = Vec::with_capacity(config.students);
    for u in 0..config.students {
        let ability = normal(config.ability_sd).sample(&mut rng);
        let aptitude: Vec<f64> = (0..s_count)
            .map(|_| normal(config.aptitude_sd).sample(&mut rng))
            .collect();
        let mut knowledge = vec![0.0f64; s_count];
        let len = rng.random_range(config.min_length..=config.max_length);
        let mut t_ms: u64 = 1_600_000_000_000 + rng.random_range(0..30 * 24 * 3_600_000u64);
        let mut skill = rng.random_range(0..s_count);
        let mut interactions = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 {
                let gap_hours = if rng.random::<f64>() < end_session {
                    between.sample(&mut rng)
                } else {
                    within.sample(&mut rng) / 60.0
                };
                let gap_ms = (gap_hours * HOUR_MS).round().max(1.0) as u64;
                t_ms += gap_ms;
                let keep = (-decay_per_hour * gap_ms as f64 / HOUR_MS).exp();
                knowledge.iter_mut().for_each(|k| *k *= keep);
                if rng.random::<f64>() >= config.stay_probability {
                    skill = match neighbours[skill].choose(&mut rng) {
                        Some(&n) if rng.random::<bool>() => n,
                        _ => rng.random_range(0..s_count),
                    };
                }
            }
            let exercise = *members[skill].choose(&mut rng).expect("every skill has exercises");
            let logit = ability + aptitude[skill] + knowledge[skill] - difficulty[exercise as usize];
            let correct = rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp());
            let gain = if correct {
                config.gain_correct
            } else {
                config.gain_incorrect
            };
            knowledge[skill] += gain;
            for &n in &neighbours[skill] {
                knowledge[n] += config.transfer * gain;
            }
            interactions.push(Interaction {
                exercise,
                skill: skill as u32,
                correct,
                timestamp_ms: t_ms,
            });
        }
        students.push(StudentLog {
            student_id: format!("syn{u:06}"),
            interactions,
        });
    }
    Ok((
        InteractionLog { students },
        SynthWorld {
            skill_of,
            difficulty,
            linked,
        },
    ))
}
