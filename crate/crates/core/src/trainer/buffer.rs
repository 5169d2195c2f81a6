use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::worldmodel::TrajectoryBatch;

/// One complete episode; `obs` has one more entry than the per-step fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub flags: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        if self.obs.len() != l + 1
            || self.rewards.len() != l
            || self.terminals.len() != l
            || self.flags.len() != l
        {
            return Err(Error::contract("episode fields have inconsistent lengths"));
        }
        Ok(())
    }
}

/// FIFO store of complete episodes bounded by a total step count.
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
    steps: usize,
}

impl EpisodeBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity,
            steps: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Append an episode, evicting the oldest ones to stay within capacity.
    pub fn push(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if episode.len() > self.capacity {
            return Err(Error::contract(format!(
                "episode of {} steps exceeds buffer capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        while self.steps + episode.len() > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.steps -= old.len();
        }
        self.steps += episode.len();
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Whether at least one stored episode has `t` or more steps.
    pub fn ready(&self, t: usize) -> bool {
        self.episodes.iter().any(|e| e.len() >= t)
    }

    /// `n` segments of `t` transitions; episode chosen uniformly among those
    /// long enough, then the offset uniformly.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, t: usize, rng: &mut R) -> Result<TrajectoryBatch> {
        if n == 0 || t == 0 {
            return Err(Error::contract("batch size and segment length must be >= 1"));
        }
        let eligible: Vec<&Episode> = self.episodes.iter().filter(|e| e.len() >= t).collect();
        if eligible.is_empty() {
            return Err(Error::NotReady(format!("no stored episode has {t} steps")));
        }
        let picks: Vec<(&Episode, usize)> = (0..n)
            .map(|_| {
                let e = eligible[rng.gen_range(0..eligible.len())];
                (e, rng.gen_range(0..=e.len() - t))
            })
            .collect();
        let obs_dim = picks[0].0.obs[0].len();
        let act_dim = picks[0].0.actions[0].len();
        let gather = |cols: usize, f: &dyn Fn(&Episode, usize) -> Vec<f64>, step: usize| {
            let data = picks.iter().flat_map(|(e, o)| f(e, o + step)).collect();
            Tensor::new(n, cols, data)
        };
        Ok(TrajectoryBatch {
            obs: (0..=t)
                .map(|s| gather(obs_dim, &|e, i| e.obs[i].clone(), s))
                .collect::<Result<_>>()?,
            actions: (0..t)
                .map(|s| gather(act_dim, &|e, i| e.actions[i].clone(), s))
                .collect::<Result<_>>()?,
            rewards: (0..t)
                .map(|s| gather(1, &|e, i| vec![e.rewards[i]], s))
                .collect::<Result<_>>()?,
            terminals: (0..t)
                .map(|s| picks.iter().map(|(e, o)| e.terminals[o + s]).collect())
                .collect(),
            flags: (0..t)
                .map(|s| picks.iter().map(|(e, o)| e.flags[o + s]).collect())
                .collect(),
            offsets: picks.iter().map(|(_, o)| *o).collect(),
            episode_lens: picks.iter().map(|(e, _)| e.len()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded;
    use proptest::prelude::*;

    pub(crate) fn episode(len: usize, tag: f64) -> Episode {
        Episode {
            obs: (0..=len).map(|i| vec![tag, i as f64]).collect(),
            actions: (0..len).map(|i| vec![i as f64 / 100.0]).collect(),
            rewards: (0..len).map(|i| tag + i as f64).collect(),
            terminals: (0..len).map(|i| i + 1 == len).collect(),
            flags: vec![false; len],
        }
    }

    #[test]
    fn sampling_contracts() {
        let mut b = EpisodeBuffer::new(100);
        assert!(matches!(b.sample_batch(1, 1, &mut seeded(0)), Err(Error::NotReady(_))));
        b.push(episode(5, 1.0)).unwrap();
        assert!(matches!(b.sample_batch(2, 6, &mut seeded(0)), Err(Error::NotReady(_))));
        let one = b.sample_batch(1, 1, &mut seeded(0)).unwrap();
        assert_eq!((one.obs.len(), one.actions.len()), (2, 1));
        let batch = b.sample_batch(4, 3, &mut seeded(1)).unwrap();
        assert_eq!(batch.horizon(), 3);
        batch.validate(2, 1).unwrap();
        for (n, &o) in batch.offsets.iter().enumerate() {
            // Observations carry their in-episode index in column 1.
            assert_eq!(batch.obs[0].get(n, 1), o as f64);
            assert_eq!(batch.rewards[2].get(n, 0), 1.0 + (o + 2) as f64);
        }
        assert_eq!(batch, b.sample_batch(4, 3, &mut seeded(1)).unwrap());
    }

    #[test]
    fn eviction_keeps_whole_episodes() {
        let mut b = EpisodeBuffer::new(10);
        b.push(episode(4, 1.0)).unwrap();
        b.push(episode(4, 2.0)).unwrap();
        b.push(episode(4, 3.0)).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.steps(), 8);
        assert_eq!(b.episodes().next().unwrap().obs[0][0], 2.0);
        assert!(b.push(episode(11, 4.0)).is_err());
        let mut bad = episode(3, 0.0);
        bad.rewards.pop();
        assert!(b.push(bad).is_err());
    }

    proptest! {
        #[test]
        fn capacity_never_exceeded(lens in prop::collection::vec(1usize..20, 1..40)) {
            let mut b = EpisodeBuffer::new(30);
            for (i, l) in lens.iter().enumerate() {
                b.push(episode(*l, i as f64)).unwrap();
                prop_assert!(b.steps() <= 30);
                prop_assert_eq!(b.steps(), b.episodes().map(Episode::len).sum::<usize>());
                prop_assert!(b.episodes().all(|e| e.validate().is_ok()));
            }
        }
    }
}
