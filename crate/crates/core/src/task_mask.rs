//! Task-specific soft masks generated from trainable task embeddings.
//!
//! Tasks are indexed from 0. Every task owns, per mask slot `k`, an embedding
//! `task{t}.emb{k}` of length `f` and a mixer `task{t}.mix{k}.{w,b}` mapping the
//! concatenation `tanh(s·e_own) ∥ [tanh(s·e_r); tanh(−s·e_r)]…` over the other
//! `M − 1` tasks to `f` outputs. Other tasks occupy fixed positions in ascending
//! order; tasks outside the aggregate set contribute zeros.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, uniform, DenseArray, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// How a task's mask is computed from the embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// `σ(s·mixer[tanh(s·e) ∥ opposite pairs of related tasks])`.
    Relation,
    /// `σ(s·e)`, no information from other tasks.
    Base,
    /// Relation mask with the negated rows left out.
    PositiveOnly,
}

/// Shape bookkeeping for the embeddings and mixers of `tasks` tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskLayout {
    pub tasks: usize,
    pub slots: usize,
    pub dim: usize,
}

impl MaskLayout {
    pub fn mixer_width(&self) -> usize {
        (2 * (self.tasks - 1) + 1) * self.dim
    }

    /// Position of `other` among the tasks feeding `owner`'s mixer.
    pub fn position(&self, owner: usize, other: usize) -> usize {
        if other < owner {
            other
        } else {
            other - 1
        }
    }
}

pub fn embedding_name(task: usize, slot: usize) -> String {
    format!("task{task}.emb{slot}")
}

pub fn mixer_weight(task: usize, slot: usize) -> String {
    format!("task{task}.mix{slot}.w")
}

pub fn mixer_bias(task: usize, slot: usize) -> String {
    format!("task{task}.mix{slot}.b")
}

/// `s = 1/s_max + (s_max − 1/s_max)·(b−1)/(B−1)` for 1-based batch `b` of `B`.
pub fn anneal_scale(batch: usize, total: usize, s_max: f64) -> Result<f64> {
    if batch == 0 || batch > total {
        return Err(Error::InvalidArgument(format!("batch {batch} outside 1..={total}")));
    }
    if s_max <= 1.0 {
        return Err(Error::InvalidArgument(format!("s_max must exceed 1, got {s_max}")));
    }
    if total == 1 {
        return Ok(s_max);
    }
    let inv = 1.0 / s_max;
    Ok(inv + (s_max - inv) * (batch - 1) as f64 / (total - 1) as f64)
}

pub fn base_mask(e: &[f64], s: f64) -> Vec<f64> {
    e.iter().map(|&x| sigmoid(s * x)).collect()
}

/// `[tanh(s·e); tanh(−s·e)]` as a `[2, f]` array.
pub fn opposite_pair(e: &[f64], s: f64) -> DenseArray {
    let pos: Vec<f64> = e.iter().map(|&x| (s * x).tanh()).collect();
    let neg: Vec<f64> = e.iter().map(|&x| (-s * x).tanh()).collect();
    DenseArray::new(vec![2, e.len()], [pos, neg].concat()).expect("two rows of equal length")
}

/// Every task in `0..=current` except `target`, ascending.
pub fn aggregate_set(target: usize, current: usize) -> Result<Vec<usize>> {
    if target > current {
        return Err(Error::InvalidArgument(format!("task {target} is after current task {current}")));
    }
    Ok((0..=current).filter(|&t| t != target).collect())
}

/// Creates zero embeddings and identity/zero mixers for every task.
pub fn allocate(store: &mut ParamStore, layout: &MaskLayout) {
    let (f, w) = (layout.dim, layout.mixer_width());
    for t in 0..layout.tasks {
        for k in 0..layout.slots {
            store.insert(embedding_name(t, k), DenseArray::zeros(&[f]));
            let mut mix = DenseArray::zeros(&[w, f]);
            for j in 0..f {
                mix.data_mut()[j * f + j] = 1.0;
            }
            store.insert(mixer_weight(t, k), mix);
            store.insert(mixer_bias(t, k), DenseArray::zeros(&[f]));
        }
    }
}

/// Draws a task's embeddings from uniform(−1, 1)/s_max.
pub fn init_embeddings(
    store: &mut ParamStore,
    layout: &MaskLayout,
    task: usize,
    s_max: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    if task >= layout.tasks {
        return Err(Error::InvalidArgument(format!("task {task} beyond {} configured", layout.tasks)));
    }
    for k in 0..layout.slots {
        store.insert(embedding_name(task, k), uniform(rng, &[layout.dim], 1.0 / s_max));
    }
    Ok(())
}

/// Whether any embedding value of `task` is non-zero.
pub fn is_initialized(store: &ParamStore, layout: &MaskLayout, task: usize) -> bool {
    (0..layout.slots).any(|k| {
        store.get(&embedding_name(task, k)).is_ok_and(|e| e.data().iter().any(|&v| v != 0.0))
    })
}

/// Builds one mask vector (`[f]`) per slot for `task` inside `g`.
pub fn mask_vars(
    g: &mut Graph,
    store: &ParamStore,
    layout: &MaskLayout,
    kind: MaskKind,
    task: usize,
    current: usize,
    s: f64,
) -> Result<Vec<Var>> {
    if task > current || current >= layout.tasks {
        return Err(Error::InvalidArgument(format!(
            "mask for task {task} requested at current task {current} of {}",
            layout.tasks
        )));
    }
    if s <= 0.0 {
        return Err(Error::InvalidArgument(format!("mask scale must be positive, got {s}")));
    }
    let f = layout.dim;
    let others = aggregate_set(task, current)?;
    (0..layout.slots)
        .map(|k| {
            let own = g.param(store, &embedding_name(task, k))?;
            if kind == MaskKind::Base {
                let z = g.scale(own, s)?;
                return g.sigmoid(z);
            }
            if !store.contains(&mixer_weight(task, k)) {
                return Err(Error::MissingParam(mixer_weight(task, k)));
            }
            let zero = g.constant(DenseArray::zeros(&[f]))?;
            let mut parts = vec![zero; 2 * layout.tasks - 1];
            let z = g.scale(own, s)?;
            parts[0] = g.tanh(z)?;
            for &r in &others {
                let e = g.param(store, &embedding_name(r, k))?;
                let z = g.scale(e, s)?;
                let pos = g.tanh(z)?;
                let p = layout.position(task, r);
                parts[1 + 2 * p] = pos;
                if kind == MaskKind::Relation {
                    parts[2 + 2 * p] = g.scale(pos, -1.0)?;
                }
            }
            let x = g.concat(&parts)?;
            let x = g.reshape(x, &[1, layout.mixer_width()])?;
            let w = g.param(store, &mixer_weight(task, k))?;
            let b = g.param(store, &mixer_bias(task, k))?;
            let h = g.matmul(x, w)?;
            let h = g.add_bias(h, b)?;
            let h = g.scale(h, s)?;
            let m = g.sigmoid(h)?;
            g.reshape(m, &[f])
        })
        .collect()
}

/// Mask values for every slot of `task`, outside of any training graph.
pub fn task_masks(
    store: &ParamStore,
    layout: &MaskLayout,
    kind: MaskKind,
    task: usize,
    current: usize,
    s: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars = mask_vars(&mut g, store, layout, kind, task, current, s)?;
    Ok(vars.into_iter().map(|v| g.value(v).data().to_vec()).collect())
}

/// One slot of `task`'s relation-aware mask.
pub fn relation_mask(
    store: &ParamStore,
    layout: &MaskLayout,
    task: usize,
    slot: usize,
    s: f64,
    current: usize,
) -> Result<Vec<f64>> {
    if slot >= layout.slots {
        return Err(Error::InvalidArgument(format!("slot {slot} of {}", layout.slots)));
    }
    Ok(task_masks(store, layout, MaskKind::Relation, task, current, s)?.swap_remove(slot))
}

/// Masks of a trained task frozen at `s_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenMasks {
    pub task: usize,
    pub slots: Vec<Vec<f64>>,
}

pub fn snapshot_masks(
    store: &ParamStore,
    layout: &MaskLayout,
    kind: MaskKind,
    task: usize,
    current: usize,
    s_max: f64,
) -> Result<FrozenMasks> {
    if !is_initialized(store, layout, task) {
        return Err(Error::UntrainedTask(task));
    }
    Ok(FrozenMasks { task, slots: task_masks(store, layout, kind, task, current, s_max)? })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::check_params;

    fn setup(tasks: usize, slots: usize, dim: usize, trained: usize) -> (MaskLayout, ParamStore) {
        let layout = MaskLayout { tasks, slots, dim };
        let mut store = ParamStore::new();
        allocate(&mut store, &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..trained {
            init_embeddings(&mut store, &layout, t, 50.0, &mut rng).unwrap();
        }
        (layout, store)
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        assert!((anneal_scale(1, 7, 50.0).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(anneal_scale(7, 7, 50.0).unwrap(), 50.0);
        assert!((anneal_scale(2, 3, 50.0).unwrap() - 25.01).abs() < 1e-12);
        assert_eq!(anneal_scale(1, 1, 50.0).unwrap(), 50.0);
        assert!(anneal_scale(0, 3, 50.0).is_err());
        assert!(anneal_scale(4, 3, 50.0).is_err());
        assert!(anneal_scale(1, 3, 1.0).is_err());
    }

    #[test]
    fn base_mask_examples() {
        assert!(base_mask(&[0.0; 5], 7.0).iter().all(|&m| m == 0.5));
        assert!((base_mask(&[30.0 / 4.0], 4.0)[0] - 1.0).abs() < 1e-12);
        let m = base_mask(&[0.1, -0.1], 50.0);
        assert!((m[0] - 0.99331).abs() < 1e-5);
        assert!((m[1] - 0.00669).abs() < 1e-5);
        assert!((m[0] - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn opposite_pair_examples() {
        assert!(opposite_pair(&[0.0; 3], 50.0).data().iter().all(|&v| v == 0.0));
        let p = opposite_pair(&[0.02], 50.0);
        assert!((p.data()[0] - 0.76159).abs() < 1e-5);
        assert_eq!(p.data()[1], -p.data()[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = uniform(&mut rng, &[16], 2.0);
        let p = opposite_pair(e.data(), 3.3);
        for j in 0..16 {
            assert_eq!(p.row(1)[j], -p.row(0)[j]);
        }
    }

    #[test]
    fn aggregate_sets() {
        assert_eq!(aggregate_set(0, 2).unwrap(), vec![1, 2]);
        assert_eq!(aggregate_set(1, 2).unwrap(), vec![0, 2]);
        assert_eq!(aggregate_set(2, 2).unwrap(), vec![0, 1]);
        assert!(aggregate_set(0, 0).unwrap().is_empty());
        assert_eq!(aggregate_set(1, 1).unwrap(), vec![0]);
        assert!(aggregate_set(3, 2).is_err());
    }

    #[test]
    fn zero_embeddings_give_half_masks() {
        let (layout, store) = setup(3, 2, 4, 0);
        for kind in [MaskKind::Relation, MaskKind::Base, MaskKind::PositiveOnly] {
            let masks = task_masks(&store, &layout, kind, 1, 2, 50.0).unwrap();
            assert!(masks.iter().flatten().all(|&m| m == 0.5));
        }
    }

    #[test]
    fn zeroed_partner_matches_restricted_mixer() {
        let (layout, mut store) = setup(2, 1, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        store.insert(mixer_weight(1, 0), uniform(&mut rng, &[15, 5], 0.4));
        store.insert(mixer_bias(1, 0), uniform(&mut rng, &[5], 0.1));
        store.insert(embedding_name(0, 0), DenseArray::zeros(&[5]));
        let s = 3.0;
        let got = relation_mask(&store, &layout, 1, 0, s, 1).unwrap();
        let e = store.get(&embedding_name(1, 0)).unwrap().data().to_vec();
        let w = store.get(&mixer_weight(1, 0)).unwrap().data().to_vec();
        let b = store.get(&mixer_bias(1, 0)).unwrap().data().to_vec();
        for j in 0..5 {
            let pre: f64 = (0..5).map(|i| (s * e[i]).tanh() * w[i * 5 + j]).sum::<f64>() + b[j];
            assert!((got[j] - sigmoid(s * pre)).abs() < 1e-14);
        }
    }

    #[test]
    fn own_selector_composes_tanh_and_sigmoid() {
        let (layout, mut store) = setup(3, 1, 1, 0);
        store.insert(embedding_name(2, 0), DenseArray::vector(vec![0.01]));
        let m = relation_mask(&store, &layout, 2, 0, 50.0, 2).unwrap();
        let want = sigmoid(50.0 * 0.5f64.tanh());
        assert!((50.0 * 0.5f64.tanh() - 23.105).abs() < 1e-3);
        assert!((m[0] - want).abs() < 1e-15);
        assert!((m[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_columns_start_inert() {
        let (layout, mut store) = setup(3, 2, 4, 2);
        let before = task_masks(&store, &layout, MaskKind::Relation, 1, 1, 50.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_embeddings(&mut store, &layout, 2, 50.0, &mut rng).unwrap();
        let after = task_masks(&store, &layout, MaskKind::Relation, 1, 2, 50.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn snapshot_is_a_copy() {
        let (layout, mut store) = setup(2, 2, 3, 1);
        assert!(matches!(
            snapshot_masks(&store, &layout, MaskKind::Relation, 1, 1, 50.0),
            Err(Error::UntrainedTask(1))
        ));
        let a = snapshot_masks(&store, &layout, MaskKind::Relation, 0, 1, 50.0).unwrap();
        let b = snapshot_masks(&store, &layout, MaskKind::Relation, 0, 1, 50.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.slots, task_masks(&store, &layout, MaskKind::Relation, 0, 1, 50.0).unwrap());
        let kept = a.clone();
        store.insert(embedding_name(0, 0), DenseArray::vector(vec![0.3, -0.2, 0.9]));
        assert_ne!(task_masks(&store, &layout, MaskKind::Relation, 0, 1, 50.0).unwrap(), kept.slots);
        assert_eq!(a, kept);
    }

    #[test]
    fn base_masks_ignore_other_tasks() {
        let (layout, mut store) = setup(3, 1, 4, 3);
        let before = task_masks(&store, &layout, MaskKind::Base, 0, 2, 10.0).unwrap();
        store.insert(embedding_name(1, 0), DenseArray::vector(vec![1.0, 2.0, 3.0, 4.0]));
        store.insert(embedding_name(2, 0), DenseArray::vector(vec![-1.0; 4]));
        assert_eq!(before, task_masks(&store, &layout, MaskKind::Base, 0, 2, 10.0).unwrap());
        let e = store.get(&embedding_name(0, 0)).unwrap().data().to_vec();
        assert_eq!(before[0], base_mask(&e, 10.0));
    }

    #[test]
    fn positive_only_matches_relation_without_negative_columns() {
        let (layout, mut store) = setup(3, 1, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for t in 0..3 {
            let e = uniform(&mut rng, &[3], 0.1).map(f64::abs);
            store.insert(embedding_name(t, 0), e);
        }
        let mut w = uniform(&mut rng, &[15, 3], 0.5);
        for p in 0..2 {
            for row in (2 + 2 * p) * 3..(3 + 2 * p) * 3 {
                w.data_mut()[row * 3..row * 3 + 3].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        store.insert(mixer_weight(1, 0), w);
        let rel = task_masks(&store, &layout, MaskKind::Relation, 1, 2, 7.0).unwrap();
        let pos = task_masks(&store, &layout, MaskKind::PositiveOnly, 1, 2, 7.0).unwrap();
        assert_eq!(rel, pos);
    }

    #[test]
    fn embedding_gradients_pass_check() {
        let (layout, mut store) = setup(3, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..2 {
            store.insert(mixer_weight(2, k), uniform(&mut rng, &[15, 3], 0.5));
            store.insert(mixer_bias(2, k), uniform(&mut rng, &[3], 0.5));
        }
        let mut sub = ParamStore::new();
        for (n, v) in store.iter() {
            if n.starts_with("task2.") || n.contains(".emb") {
                sub.insert(n.clone(), v.clone());
            }
        }
        let target = uniform(&mut rng, &[6], 1.0);
        let err = check_params(&sub, 1e-6, |s| {
            let mut g = Graph::new();
            let ms = mask_vars(&mut g, s, &layout, MaskKind::Relation, 2, 2, 1.3)?;
            let cat = g.concat(&ms)?;
            let root = g.mse(cat, target.data())?;
            Ok((g, root))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn masks_stay_in_open_unit_interval(
            vals in proptest::collection::vec(-0.5f64..0.5, 12),
            s in 0.01f64..30.0,
        ) {
            let (layout, mut store) = setup(3, 1, 4, 0);
            for t in 0..3 {
                store.insert(embedding_name(t, 0), DenseArray::vector(vals[4 * t..4 * t + 4].to_vec()));
            }
            for m in task_masks(&store, &layout, MaskKind::Relation, 0, 2, s).unwrap().concat() {
                prop_assert!(m > 0.0 && m < 1.0);
            }
        }

        #[test]
        fn tasks_outside_aggregate_set_are_ignored(
            a in proptest::collection::vec(-1.0f64..1.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let (layout, mut store) = setup(4, 1, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            store.insert(mixer_weight(0, 0), uniform(&mut rng, &[21, 3], 0.5));
            let base = task_masks(&store, &layout, MaskKind::Relation, 0, 1, 5.0).unwrap();
            store.insert(embedding_name(2, 0), DenseArray::vector(a.clone()));
            store.insert(embedding_name(3, 0), DenseArray::vector(b.clone()));
            let one = task_masks(&store, &layout, MaskKind::Relation, 0, 1, 5.0).unwrap();
            store.insert(embedding_name(2, 0), DenseArray::vector(b));
            store.insert(embedding_name(3, 0), DenseArray::vector(a));
            let two = task_masks(&store, &layout, MaskKind::Relation, 0, 1, 5.0).unwrap();
            prop_assert_eq!(&base, &one);
            prop_assert_eq!(&one, &two);
        }

        #[test]
        fn larger_scale_pushes_toward_saturation(e in -1.0f64..1.0, s in 0.1f64..20.0, ds in 0.01f64..5.0) {
            prop_assume!(e.abs() > 1e-6);
            let lo = base_mask(&[e], s)[0];
            let hi = base_mask(&[e], s + ds)[0];
            if e > 0.0 { prop_assert!(hi >= lo); } else { prop_assert!(hi <= lo); }
        }
    }
}
