//! Patch-based memory: per-domain prototype items, top-K selection, gated
//! data-driven item updates, and memory-based query refinement.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::xavier;
use crate::numerics::ops::{gate_blend, l2_normalize_rows, row_softmax, sigmoid};
use crate::numerics::{Graph, Matrix, Real, Var};

/// Guard for zero rows during L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryConfig {
    /// Number of referenced items.
    pub k: usize,
    /// Temperature of the item-selection softmax.
    pub tau_select: f64,
    /// Temperature of the patch-level attention softmaxes.
    pub tau_attn: f64,
    /// Rescale the selected weights to sum to one.
    pub renormalize_topk: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { k: 3, tau_select: 0.3, tau_attn: 1.0, renormalize_topk: false }
    }
}

/// Whether a forward pass writes updated items back into the bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    Train,
    Infer,
}

/// How items are chosen for a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Similarity-ranked top-K.
    TopK,
    /// A single forced item with weight one.
    Forced(usize),
}

/// Items chosen for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySelection {
    /// Item ids by descending weight.
    pub indices: Vec<usize>,
    /// Weights applied to each selected item.
    pub lambdas: Vec<f64>,
    /// Softmax weights over all items.
    pub full_lambda: Vec<f64>,
}

/// Updated rows `m̃` for one selected item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemUpdate<T> {
    pub item: usize,
    pub rows: Matrix<T>,
}

/// Result of a memory pass.
#[derive(Clone, Debug)]
pub struct MemoryOutput<T> {
    pub refined: Matrix<T>,
    pub selection: MemorySelection,
    pub updates: Vec<ItemUpdate<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    /// `M` items of shape `N × d_model`.
    pub items: Vec<Matrix<T>>,
    pub u_psi: Matrix<T>,
    pub w_psi: Matrix<T>,
    pub cfg: MemoryConfig,
    /// Domain each item was seeded from.
    pub init_domain: Vec<Option<usize>>,
}

impl<T: Real> MemoryBank<T> {
    pub fn new(
        items: Vec<Matrix<T>>,
        u_psi: Matrix<T>,
        w_psi: Matrix<T>,
        cfg: MemoryConfig,
        init_domain: Vec<Option<usize>>,
    ) -> Result<Self> {
        let bank = Self { items, u_psi, w_psi, cfg, init_domain };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.items.len();
        if m == 0 {
            return Err(Error::Config("memory needs at least one item".into()));
        }
        if self.cfg.k == 0 || self.cfg.k > m {
            return Err(Error::Config(format!("K = {} must lie in 1..={m}", self.cfg.k)));
        }
        if !(self.cfg.tau_select > 0.0) || !(self.cfg.tau_attn > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        let shape = self.items[0].shape();
        if self.items.iter().any(|i| i.shape() != shape) {
            return Err(Error::Shape("memory items differ in shape".into()));
        }
        let d = shape.1;
        if self.u_psi.shape() != (d, d) || self.w_psi.shape() != (d, d) {
            return Err(Error::Shape(format!("gate projections must be {d}x{d}")));
        }
        if self.init_domain.len() != m {
            return Err(Error::Shape("init_domain length differs from item count".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.u_psi.rows()
    }

    pub fn max_patches(&self) -> usize {
        self.items[0].rows()
    }

    /// First item seeded from `domain`.
    pub fn own_item(&self, domain: usize) -> Option<usize> {
        self.init_domain.iter().position(|&d| d == Some(domain))
    }

    /// Each item restricted to its first `p` rows.
    pub fn align(&self, p: usize) -> Result<Vec<Matrix<T>>> {
        self.items.iter().map(|m| m.slice_rows(0, p)).collect()
    }

    fn flat_items(&self, p: usize) -> Result<Matrix<T>> {
        let d = self.d_model();
        let mut data = Vec::with_capacity(self.items.len() * p * d);
        for m in &self.items {
            if p > m.rows() {
                return Err(Error::Shape(format!("{p} observed patches exceed {} item rows", m.rows())));
            }
            data.extend_from_slice(&m.data()[..p * d]);
        }
        Matrix::new(self.items.len(), p * d, data)
    }

    fn check_query(&self, q: &Matrix<T>) -> Result<usize> {
        if q.cols() != self.d_model() || q.rows() == 0 || q.rows() > self.max_patches() {
            return Err(Error::Shape(format!(
                "query {:?} incompatible with {}x{} items",
                q.shape(),
                self.max_patches(),
                self.d_model()
            )));
        }
        Ok(q.rows())
    }

    /// Similarity softmax over all aligned items and the top-K choice.
    pub fn select_topk(&self, q_hat: &Matrix<T>) -> Result<MemorySelection> {
        let p = self.check_query(q_hat)?;
        let flat = self.flat_items(p)?;
        let logits = q_hat.reshape(1, q_hat.len())?.matmul_nt(&flat)?;
        let lambda = row_softmax(&logits, self.cfg.tau_select)?;
        Ok(self.choose(lambda.data()))
    }

    fn choose(&self, lambda: &[T]) -> MemorySelection {
        let full: Vec<f64> = lambda.iter().map(|v| v.as_f64()).collect();
        let indices = top_k(&full, self.cfg.k);
        let mut lambdas: Vec<f64> = indices.iter().map(|&i| full[i]).collect();
        if self.cfg.renormalize_topk {
            let s: f64 = lambdas.iter().sum();
            lambdas.iter_mut().for_each(|l| *l /= s);
        }
        MemorySelection { indices, lambdas, full_lambda: full }
    }

    fn forced(&self, item: usize) -> Result<MemorySelection> {
        if item >= self.items.len() {
            return Err(Error::InvalidArgument(format!("item {item} out of range")));
        }
        let mut full = vec![0.0; self.items.len()];
        full[item] = 1.0;
        Ok(MemorySelection { indices: vec![item], lambdas: vec![1.0], full_lambda: full })
    }

    /// Full memory pass for one query without touching the bank.
    pub fn forward(&self, q: &Matrix<T>, route: Route) -> Result<MemoryOutput<T>> {
        let p = self.check_query(q)?;
        let (q_hat, _) = l2_normalize_rows(q, NORM_EPS);
        let mut selection = match route {
            Route::TopK => self.select_topk(&q_hat)?,
            Route::Forced(i) => self.forced(i)?,
        };
        let mut refined: Option<Matrix<T>> = None;
        let mut updates = Vec::with_capacity(selection.indices.len());
        // λ as computed in T, so the sum matches the graph pass bit for bit
        let lambdas_t = self.lambdas_in_t(&q_hat, &selection, route)?;
        for (&item, &lam) in selection.indices.iter().zip(&lambdas_t) {
            let m = self.items[item].slice_rows(0, p)?;
            let m_tilde = update_item(&m, &q_hat, &self.u_psi, &self.w_psi, self.cfg.tau_attn)?;
            let q_i = refine_query(&q_hat, &m_tilde, self.cfg.tau_attn)?;
            let term = q_i.scale(lam);
            refined = Some(match refined {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
            updates.push(ItemUpdate { item, rows: m_tilde });
        }
        selection.lambdas = lambdas_t.iter().map(|v| v.as_f64()).collect();
        Ok(MemoryOutput { refined: refined.expect("K >= 1"), selection, updates })
    }

    fn lambdas_in_t(&self, q_hat: &Matrix<T>, sel: &MemorySelection, route: Route) -> Result<Vec<T>> {
        if let Route::Forced(_) = route {
            return Ok(vec![T::one()]);
        }
        let p = q_hat.rows();
        let flat = self.flat_items(p)?;
        let logits = q_hat.reshape(1, q_hat.len())?.matmul_nt(&flat)?;
        let lambda = row_softmax(&logits, self.cfg.tau_select)?;
        let mut out: Vec<T> = sel.indices.iter().map(|&i| lambda.get(0, i)).collect();
        if self.cfg.renormalize_topk {
            let s = out.iter().fold(T::zero(), |a, &b| a + b);
            let r = T::one() / s;
            out.iter_mut().for_each(|l| *l *= r);
        }
        Ok(out)
    }

    /// Memory pass that, in train mode, writes `m̃` back into the bank.
    pub fn memory_forward(&mut self, q: &Matrix<T>, mode: MemoryMode, route: Route) -> Result<(Matrix<T>, MemorySelection)> {
        let out = self.forward(q, route)?;
        if mode == MemoryMode::Train {
            self.apply_updates(&out.updates)?;
        }
        Ok((out.refined, out.selection))
    }

    /// Batched write-back: rows are averaged over the updates that observed
    /// them, L2-normalized, and stored.
    pub fn apply_updates(&mut self, updates: &[ItemUpdate<T>]) -> Result<()> {
        let d = self.d_model();
        for item in 0..self.items.len() {
            let mine: Vec<&ItemUpdate<T>> = updates.iter().filter(|u| u.item == item).collect();
            if mine.is_empty() {
                continue;
            }
            let rows = mine.iter().map(|u| u.rows.rows()).max().unwrap_or(0);
            let mut sum = Matrix::<T>::zeros(rows, d);
            let mut counts = vec![0usize; rows];
            for u in &mine {
                if u.rows.cols() != d || u.rows.rows() > self.max_patches() {
                    return Err(Error::Shape(format!("update of shape {:?}", u.rows.shape())));
                }
                for r in 0..u.rows.rows() {
                    for (s, &v) in sum.row_mut(r).iter_mut().zip(u.rows.row(r)) {
                        *s += v;
                    }
                    counts[r] += 1;
                }
            }
            for (r, &c) in counts.iter().enumerate() {
                let inv = T::one() / T::of(c as f64);
                sum.row_mut(r).iter_mut().for_each(|v| *v *= inv);
            }
            let (normed, _) = l2_normalize_rows(&sum, NORM_EPS);
            for r in 0..rows {
                self.items[item].row_mut(r).copy_from_slice(normed.row(r));
            }
        }
        Ok(())
    }

    /// Memory pass recorded on `g`. `gates` are the bound `(U_ψ, W_ψ)`.
    pub fn forward_graph(&self, g: &mut Graph<T>, q: Var, gates: (Var, Var), route: Route) -> Result<(Var, MemorySelection, Vec<ItemUpdate<T>>)> {
        let p = self.check_query(g.value(q))?;
        let d = self.d_model();
        let q_hat = g.l2_normalize_rows(q, NORM_EPS);
        let (selection, lambda_vars) = match route {
            Route::TopK => {
                let flat = g.constant(self.flat_items(p)?);
                let q_flat = g.reshape(q_hat, 1, p * d)?;
                let logits = g.matmul_nt(q_flat, flat)?;
                let lambda = g.row_softmax(logits, self.cfg.tau_select)?;
                let sel = self.choose(g.value(lambda).data());
                let mut vars = Vec::with_capacity(sel.indices.len());
                for &i in &sel.indices {
                    vars.push(Some(g.element(lambda, 0, i)?));
                }
                if self.cfg.renormalize_topk {
                    let mut s = vars[0].expect("selected");
                    for v in &vars[1..] {
                        s = g.add(s, v.expect("selected"))?;
                    }
                    let r = g.recip(s);
                    for v in vars.iter_mut() {
                        *v = Some(g.scale_by(v.expect("selected"), r)?);
                    }
                }
                (sel, vars)
            }
            Route::Forced(i) => (self.forced(i)?, vec![None]),
        };
        let mut refined: Option<Var> = None;
        let mut updates = Vec::with_capacity(selection.indices.len());
        for (&item, lam) in selection.indices.iter().zip(&lambda_vars) {
            let m = g.constant(self.items[item].slice_rows(0, p)?);
            let m_tilde = update_item_graph(g, m, q_hat, gates, self.cfg.tau_attn)?;
            let q_i = refine_query_graph(g, q_hat, m_tilde, self.cfg.tau_attn)?;
            let term = match lam {
                Some(l) => g.scale_by(q_i, *l)?,
                None => q_i,
            };
            refined = Some(match refined {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
            updates.push(ItemUpdate { item, rows: g.value(m_tilde).clone() });
        }
        let mut selection = selection;
        selection.lambdas = lambda_vars.iter().map(|l| l.map_or(1.0, |v| g.scalar(v).as_f64())).collect();
        Ok((refined.expect("K >= 1"), selection, updates))
    }

    pub fn cast<U: Real>(&self) -> MemoryBank<U> {
        MemoryBank {
            items: self.items.iter().map(|m| m.cast()).collect(),
            u_psi: self.u_psi.cast(),
            w_psi: self.w_psi.cast(),
            cfg: self.cfg,
            init_domain: self.init_domain.clone(),
        }
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gated item update: `v = softmax(m qᵀ)`, `ψ = σ(m U + v q W)`,
/// `m̃ = (1 − ψ) ⊙ m + ψ ⊙ v q`.
pub fn update_item<T: Real>(m: &Matrix<T>, q: &Matrix<T>, u_psi: &Matrix<T>, w_psi: &Matrix<T>, tau_attn: f64) -> Result<Matrix<T>> {
    if m.shape() != q.shape() {
        return Err(Error::Shape(format!("item {:?} vs query {:?}", m.shape(), q.shape())));
    }
    let v = row_softmax(&m.matmul_nt(q)?, tau_attn)?;
    let vq = v.matmul(q)?;
    let psi = sigmoid(&m.matmul(u_psi)?.add(&vq.matmul(w_psi)?)?);
    gate_blend(m, &psi, &vq)
}

/// `w = softmax(q m̃ᵀ)`, returns `w m̃`.
pub fn refine_query<T: Real>(q: &Matrix<T>, m_tilde: &Matrix<T>, tau_attn: f64) -> Result<Matrix<T>> {
    if m_tilde.shape() != q.shape() {
        return Err(Error::Shape(format!("item {:?} vs query {:?}", m_tilde.shape(), q.shape())));
    }
    let w = row_softmax(&q.matmul_nt(m_tilde)?, tau_attn)?;
    w.matmul(m_tilde)
}

fn update_item_graph<T: Real>(g: &mut Graph<T>, m: Var, q: Var, (u, w): (Var, Var), tau: f64) -> Result<Var> {
    let logits = g.matmul_nt(m, q)?;
    let v = g.row_softmax(logits, tau)?;
    let vq = g.matmul(v, q)?;
    let a = g.matmul(m, u)?;
    let b = g.matmul(vq, w)?;
    let pre = g.add(a, b)?;
    let psi = g.sigmoid(pre);
    g.gate(m, psi, vq)
}

fn refine_query_graph<T: Real>(g: &mut Graph<T>, q: Var, m_tilde: Var, tau: f64) -> Result<Var> {
    let logits = g.matmul_nt(q, m_tilde)?;
    let w = g.row_softmax(logits, tau)?;
    g.matmul(w, m_tilde)
}

/// Builds a bank whose item `i` is the row-wise mean of up to `samples`
/// representations drawn from domain `i mod D`, L2-normalized per row.
///
/// Representations are `P_s × d_model` encoder outputs; row `r` of an item
/// averages only samples with `P_s > r`, and rows no sample observes stay
/// zero.
#[allow(clippy::too_many_arguments)]
pub fn init_memory<T: Real, R: Rng + ?Sized>(
    reps_by_domain: &[Vec<Matrix<T>>],
    domain_names: &[alloc::string::String],
    max_patches: usize,
    d_model: usize,
    samples: usize,
    items: Option<usize>,
    cfg: MemoryConfig,
    rng: &mut R,
) -> Result<MemoryBank<T>> {
    let counts: Vec<usize> = reps_by_domain.iter().map(Vec::len).collect();
    init_memory_lazy(&counts, domain_names, max_patches, d_model, samples, items, cfg, rng, &mut |d, s| {
        Ok(reps_by_domain[d][s].clone())
    })
}

/// [`init_memory`] with representations computed on demand: `represent(d, s)`
/// yields sample `s` of domain `d`, and is called only for drawn samples.
#[allow(clippy::too_many_arguments)]
pub fn init_memory_lazy<T: Real, R: Rng + ?Sized>(
    counts: &[usize],
    domain_names: &[alloc::string::String],
    max_patches: usize,
    d_model: usize,
    samples: usize,
    items: Option<usize>,
    cfg: MemoryConfig,
    rng: &mut R,
    represent: &mut dyn FnMut(usize, usize) -> Result<Matrix<T>>,
) -> Result<MemoryBank<T>> {
    if counts.is_empty() {
        return Err(Error::Config("memory initialization needs at least one domain".into()));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        let name = domain_names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        return Err(Error::EmptyDomain(name));
    }
    let m = items.unwrap_or(counts.len());
    if m == 0 {
        return Err(Error::Config("memory needs at least one item".into()));
    }
    let mut bank_items = Vec::with_capacity(m);
    let mut init_domain = Vec::with_capacity(m);
    for i in 0..m {
        let dom = i % counts.len();
        let take = samples.max(1).min(counts[dom]);
        let mut chosen = rand::seq::index::sample(rng, counts[dom], take).into_vec();
        chosen.sort_unstable();
        let mut sum = Matrix::<T>::zeros(max_patches, d_model);
        let mut row_counts = vec![0usize; max_patches];
        for &s in &chosen {
            let rep = represent(dom, s)?;
            if rep.cols() != d_model || rep.rows() > max_patches {
                return Err(Error::Shape(format!("representation {:?} for domain #{dom}", rep.shape())));
            }
            for r in 0..rep.rows() {
                for (a, &v) in sum.row_mut(r).iter_mut().zip(rep.row(r)) {
                    *a += v;
                }
                row_counts[r] += 1;
            }
        }
        for (r, &c) in row_counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::of(c as f64);
                sum.row_mut(r).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let (normed, _) = l2_normalize_rows(&sum, NORM_EPS);
        bank_items.push(normed);
        init_domain.push(Some(dom));
    }
    let u_psi = xavier(rng, d_model, d_model);
    let w_psi = xavier(rng, d_model, d_model);
    MemoryBank::new(bank_items, u_psi, w_psi, cfg, init_domain)
}

/// Accumulated selection weights per true domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Utilization {
    sums: Vec<Vec<f64>>,
    observations: Vec<usize>,
}

impl Utilization {
    pub fn new(domains: usize, items: usize) -> Self {
        Self { sums: vec![vec![0.0; items]; domains], observations: vec![0; domains] }
    }

    pub fn accumulate(&mut self, true_domain: usize, selection: &MemorySelection) -> Result<()> {
        let row = self
            .sums
            .get_mut(true_domain)
            .ok_or_else(|| Error::InvalidArgument(format!("domain {true_domain} out of range")))?;
        if row.len() != selection.full_lambda.len() {
            return Err(Error::Shape(format!(
                "selection over {} items for a {}-item table",
                selection.full_lambda.len(),
                row.len()
            )));
        }
        for (a, &l) in row.iter_mut().zip(&selection.full_lambda) {
            *a += l;
        }
        self.observations[true_domain] += 1;
        Ok(())
    }

    pub fn observations(&self) -> &[usize] {
        &self.observations
    }

    /// Row-normalized table; the flag marks domains never observed (all-zero row).
    pub fn normalized(&self) -> Vec<(Vec<f64>, bool)> {
        self.sums
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    (row.iter().map(|v| v / s).collect(), false)
                } else {
                    (vec![0.0; row.len()], true)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, seed: f64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.73 + seed).sin())
    }

    fn bank(m: usize, n: usize, d: usize, k: usize) -> MemoryBank<f64> {
        let items = (0..m).map(|i| l2_normalize_rows(&mat(n, d, i as f64), NORM_EPS).0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        MemoryBank::new(
            items,
            xavier(&mut rng, d, d),
            xavier(&mut rng, d, d),
            MemoryConfig { k, ..MemoryConfig::default() },
            (0..m).map(Some).collect(),
        )
        .unwrap()
    }

    #[test]
    fn selection_example() {
        let items = vec![
            Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            Matrix::new(1, 2, vec![0.0, 1.0]).unwrap(),
            Matrix::new(1, 2, vec![-1.0, 0.0]).unwrap(),
        ];
        let cfg = MemoryConfig { k: 2, tau_select: 1.0, ..MemoryConfig::default() };
        let b = MemoryBank::new(items, Matrix::zeros(2, 2), Matrix::zeros(2, 2), cfg, vec![None; 3]).unwrap();
        let sel = b.select_topk(&Matrix::new(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        // softmax([1, 0, -1]) evaluated by hand
        let z = 1.0f64.exp() + 1.0 + (-1.0f64).exp();
        let expected = [1.0f64.exp() / z, 1.0 / z, (-1.0f64).exp() / z];
        for (a, e) in sel.full_lambda.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((sel.full_lambda[0] - 0.6652).abs() < 1e-4);
        assert!((sel.full_lambda[1] - 0.2447).abs() < 1e-4);
        assert!((sel.full_lambda[2] - 0.0900).abs() < 1e-4);
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn identical_items_are_uniform_and_tie_break_low() {
        let item = l2_normalize_rows(&mat(4, 3, 0.0), NORM_EPS).0;
        let cfg = MemoryConfig { k: 2, ..MemoryConfig::default() };
        let b = MemoryBank::new(vec![item; 4], Matrix::zeros(3, 3), Matrix::zeros(3, 3), cfg, vec![None; 4]).unwrap();
        let sel = b.select_topk(&l2_normalize_rows(&mat(2, 3, 1.0), NORM_EPS).0).unwrap();
        assert!(sel.full_lambda.iter().all(|&l| (l - 0.25).abs() < 1e-12));
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn matching_item_dominates_at_low_temperature() {
        let q = l2_normalize_rows(&mat(2, 4, 0.3), NORM_EPS).0;
        // rotate each row's coordinate pairs by 90°: orthogonal to q row-wise
        let ortho = Matrix::from_fn(2, 4, |r, c| match c {
            0 => q.get(r, 1),
            1 => -q.get(r, 0),
            2 => q.get(r, 3),
            _ => -q.get(r, 2),
        });
        let cfg = MemoryConfig { k: 1, tau_select: 0.01, ..MemoryConfig::default() };
        let b = MemoryBank::new(vec![ortho.clone(), q.clone(), ortho], Matrix::zeros(4, 4), Matrix::zeros(4, 4), cfg, vec![None; 3]).unwrap();
        let sel = b.select_topk(&q).unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert!(sel.full_lambda[1] > 1.0 - 1e-12);
    }

    #[test]
    fn gate_extremes() {
        let q = l2_normalize_rows(&mat(3, 4, 2.0), NORM_EPS).0;
        let m = l2_normalize_rows(&mat(3, 4, 0.1), NORM_EPS).0.map(|v| v.abs() + 0.1);
        let vq = row_softmax(&m.matmul_nt(&q).unwrap(), 1.0).unwrap().matmul(&q).unwrap();
        // m has strictly positive entries, so m·U saturates with the sign of U
        let open = update_item(&m, &q, &Matrix::filled(4, 4, 1e6), &Matrix::zeros(4, 4), 1.0).unwrap();
        assert!(open.max_abs_diff(&vq).unwrap() < 1e-12);
        let closed = update_item(&m, &q, &Matrix::filled(4, 4, -1e6), &Matrix::zeros(4, 4), 1.0).unwrap();
        assert!(closed.max_abs_diff(&m).unwrap() < 1e-12);
        let half = update_item(&m, &q, &Matrix::zeros(4, 4), &Matrix::zeros(4, 4), 1.0).unwrap();
        assert!(half.max_abs_diff(&m.add(&vq).unwrap().scale(0.5)).unwrap() < 1e-12);
    }

    #[test]
    fn single_patch_closed_forms() {
        let m = l2_normalize_rows(&mat(1, 4, 0.1), NORM_EPS).0;
        let q = l2_normalize_rows(&mat(1, 4, 1.7), NORM_EPS).0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, w) = (xavier::<f64, _>(&mut rng, 4, 4), xavier::<f64, _>(&mut rng, 4, 4));
        let m_tilde = update_item(&m, &q, &u, &w, 1.0).unwrap();
        let psi = sigmoid(&m.matmul(&u).unwrap().add(&q.matmul(&w).unwrap()).unwrap());
        let expected = gate_blend(&m, &psi, &q).unwrap();
        assert_eq!(m_tilde, expected);
        assert_eq!(refine_query(&q, &m_tilde, 1.0).unwrap(), m_tilde);
    }

    #[test]
    fn refinement_is_convex() {
        let q = mat(5, 3, 0.4);
        let row = Matrix::new(1, 3, vec![0.2, -0.4, 0.9]).unwrap();
        let same = Matrix::from_fn(5, 3, |_, c| row.get(0, c));
        let out = refine_query(&q, &same, 1.0).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                assert!((out.get(r, c) - row.get(0, c)).abs() < 1e-15);
            }
        }
        let mt = mat(5, 3, 2.2);
        let out = refine_query(&q, &mt, 1.0).unwrap();
        for c in 0..3 {
            let lo = (0..5).map(|r| mt.get(r, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..5).map(|r| mt.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            for r in 0..5 {
                assert!(out.get(r, c) >= lo - 1e-15 && out.get(r, c) <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn k_one_is_a_single_term() {
        let b = bank(3, 6, 4, 1);
        let q = mat(4, 4, 0.9);
        let out = b.forward(&q, Route::TopK).unwrap();
        let (q_hat, _) = l2_normalize_rows(&q, NORM_EPS);
        let first = out.selection.indices[0];
        let m = b.items[first].slice_rows(0, 4).unwrap();
        let expected = refine_query(&q_hat, &update_item(&m, &q_hat, &b.u_psi, &b.w_psi, 1.0).unwrap(), 1.0)
            .unwrap()
            .scale(out.selection.lambdas[0]);
        assert_eq!(out.refined, expected);
    }

    #[test]
    fn identical_items_with_uniform_weights_reduce_to_one_term() {
        let item = l2_normalize_rows(&mat(5, 4, 0.0), NORM_EPS).0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MemoryConfig { k: 3, ..MemoryConfig::default() };
        let b = MemoryBank::new(vec![item; 3], xavier(&mut rng, 4, 4), xavier(&mut rng, 4, 4), cfg, vec![None; 3]).unwrap();
        let q = mat(3, 4, 0.5);
        let all = b.forward(&q, Route::TopK).unwrap().refined;
        let single = b.forward(&q, Route::Forced(0)).unwrap().refined;
        assert!(all.max_abs_diff(&single).unwrap() < 1e-12);
    }

    #[test]
    fn padded_rows_do_not_matter() {
        let b = bank(3, 6, 4, 2);
        let mut perturbed = b.clone();
        for item in &mut perturbed.items {
            for r in 3..6 {
                item.row_mut(r).copy_from_slice(&[9.0, -9.0, 3.0, 1.0]);
            }
        }
        let q = mat(3, 4, 0.2);
        let a = b.forward(&q, Route::TopK).unwrap();
        let c = perturbed.forward(&q, Route::TopK).unwrap();
        assert_eq!(a.refined, c.refined);
        assert_eq!(a.selection, c.selection);
        let aligned = b.align(1).unwrap();
        assert_eq!(aligned[0].row(0), b.items[0].row(0));
        assert_eq!(b.align(6).unwrap()[2], b.items[2]);
    }

    #[test]
    fn train_mode_writes_back_unit_rows_and_infer_does_not() {
        let mut b = bank(3, 6, 4, 2);
        let snapshot = b.clone();
        let q = mat(4, 4, 0.6);
        let first = b.memory_forward(&q, MemoryMode::Infer, Route::TopK).unwrap();
        let second = b.memory_forward(&q, MemoryMode::Infer, Route::TopK).unwrap();
        assert_eq!(first, second);
        assert_eq!(b, snapshot);
        let (_, sel) = b.memory_forward(&q, MemoryMode::Train, Route::TopK).unwrap();
        for &i in &sel.indices {
            assert_ne!(b.items[i], snapshot.items[i]);
            for r in 0..6 {
                let n: f64 = b.items[i].row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
            assert_eq!(b.items[i].slice_rows(4, 2).unwrap(), snapshot.items[i].slice_rows(4, 2).unwrap());
        }
        let untouched: Vec<usize> = (0..3).filter(|i| !sel.indices.contains(i)).collect();
        for i in untouched {
            assert_eq!(b.items[i], snapshot.items[i]);
        }
    }

    #[test]
    fn graph_pass_matches_pure_pass() {
        for renorm in [false, true] {
            let mut b = bank(4, 6, 4, 3);
            b.cfg.renormalize_topk = renorm;
            let q = mat(5, 4, 1.3);
            let pure = b.forward(&q, Route::TopK).unwrap();
            let mut g = Graph::new();
            let qv = g.param(q.clone());
            let u = g.param(b.u_psi.clone());
            let w = g.param(b.w_psi.clone());
            let (out, sel, updates) = b.forward_graph(&mut g, qv, (u, w), Route::TopK).unwrap();
            assert_eq!(g.value(out), &pure.refined);
            assert_eq!(sel, pure.selection);
            assert_eq!(updates, pure.updates);
            if renorm {
                assert!((sel.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k_larger_than_m_is_rejected() {
        let item = Matrix::<f64>::zeros(2, 2);
        let cfg = MemoryConfig { k: 3, ..MemoryConfig::default() };
        let r = MemoryBank::new(vec![item; 2], Matrix::zeros(2, 2), Matrix::zeros(2, 2), cfg, vec![None; 2]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn init_from_single_sample_is_normalized_sample() {
        let rep = mat(3, 4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let names = [alloc::string::String::from("a")];
        let b = init_memory(&[vec![rep.clone()]], &names, 5, 4, 8, None, MemoryConfig { k: 1, ..Default::default() }, &mut rng).unwrap();
        let (expected, _) = l2_normalize_rows(&rep, NORM_EPS);
        assert_eq!(b.items[0].slice_rows(0, 3).unwrap(), expected);
        assert!(b.items[0].slice_rows(3, 2).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let twice = init_memory(&[vec![rep.clone(), rep.clone()]], &names, 5, 4, 8, None, MemoryConfig { k: 1, ..Default::default() }, &mut rng).unwrap();
        assert!(twice.items[0].max_abs_diff(&b.items[0]).unwrap() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let reps = vec![vec![mat(3, 4, 0.1), mat(3, 4, 0.2), mat(2, 4, 0.3)], vec![mat(3, 4, 1.0)]];
        let names = [alloc::string::String::from("a"), alloc::string::String::from("b")];
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            init_memory(&reps, &names, 3, 4, 2, None, MemoryConfig { k: 2, ..Default::default() }, &mut rng).unwrap()
        };
        assert_eq!(build(), build());
        let empty = vec![vec![mat(3, 4, 0.1)], vec![]];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        match init_memory(&empty, &names, 3, 4, 2, None, MemoryConfig { k: 1, ..Default::default() }, &mut rng) {
            Err(Error::EmptyDomain(name)) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn utilization_rows() {
        let mut u = Utilization::new(2, 4);
        let uniform = MemorySelection { indices: vec![0], lambdas: vec![0.25], full_lambda: vec![0.25; 4] };
        u.accumulate(0, &uniform).unwrap();
        let rows = u.normalized();
        assert_eq!(rows[0], (vec![0.25; 4], false));
        assert_eq!(rows[1], (vec![0.0; 4], true));
        let skew = MemorySelection { indices: vec![1], lambdas: vec![0.7], full_lambda: vec![0.1, 0.7, 0.1, 0.1] };
        u.accumulate(0, &skew).unwrap();
        let row = &u.normalized()[0].0;
        assert!((row[1] - 0.95 / 2.0).abs() < 1e-12);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
