//! Random matrix-valued computation graphs for gradient checks.

use kelab::rng::seeded;
use kelab::tensor::{finite_diff_check, Bindings, Graph, NodeId, Tensor};
use rand::Rng;

pub const MAX_OP_DEPTH: usize = 4;
pub const MAX_PARAMS: usize = 500;

struct Node {
    id: NodeId,
    shape: [usize; 2],
    depth: usize,
}

pub struct RandomGraph {
    pub graph: Graph<f64>,
    pub leaves: Vec<(NodeId, Tensor<f64>)>,
    pub seed: NodeId,
    pub n_params: usize,
    pub depth: usize,
}

fn new_leaf(g: &mut Graph<f64>, leaves: &mut Vec<(NodeId, Tensor<f64>)>, shape: [usize; 2], rng: &mut impl Rng) -> NodeId {
    let id = g.leaf(format!("p{}", leaves.len()));
    leaves.push((id, Tensor::uniform(&shape, 1.0, rng)));
    id
}

/// Random DAG over matrix-valued ops of op depth at most [`MAX_OP_DEPTH`],
/// read out as `sum(out ⊙ C)` for a constant `C`, so at most six levels deep.
pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = seeded(seed);
    let mut g = Graph::<f64>::new();
    let mut leaves = Vec::new();
    let mut pool: Vec<Node> = Vec::new();
    for _ in 0..rng.random_range(2..=3) {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=4)];
        let id = new_leaf(&mut g, &mut leaves, shape, &mut rng);
        pool.push(Node { id, shape, depth: 0 });
    }
    let n_ops = rng.random_range(4..=12);
    for _ in 0..n_ops {
        let params: usize = leaves.iter().map(|(_, t)| t.numel()).sum();
        let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].depth < MAX_OP_DEPTH).collect();
        if candidates.is_empty() {
            break;
        }
        let ai = candidates[rng.random_range(0..candidates.len())];
        let (a, [r, c], da) = (pool[ai].id, pool[ai].shape, pool[ai].depth);
        let partner = |want: &dyn Fn(&Node) -> bool| pool.iter().position(|n| want(n) && n.depth < MAX_OP_DEPTH);
        let room = params + 16 <= MAX_PARAMS;
        let (id, shape, depth) = match rng.random_range(0..13) {
            0 => (g.tanh(a), [r, c], da + 1),
            1 => (g.sigmoid(a), [r, c], da + 1),
            2 => {
                let s = g.scale(a, 0.5);
                (g.exp(s), [r, c], da + 2)
            }
            3 => {
                let s = g.sigmoid(a);
                (g.log(s), [r, c], da + 2)
            }
            4 => {
                let s = g.sigmoid(a);
                (g.sqrt(s), [r, c], da + 2)
            }
            5 => (g.softmax(a), [r, c], da + 1),
            6 => (g.log_softmax(a), [r, c], da + 1),
            7 | 8 => match partner(&|n| n.shape == [r, c] && n.id != a) {
                Some(bi) => {
                    let b = pool[bi].id;
                    let d = da.max(pool[bi].depth) + 1;
                    let id = match rng.random_range(0..3) {
                        0 => g.add(a, b),
                        1 => g.sub(a, b),
                        _ => g.mul(a, b),
                    };
                    (id, [r, c], d)
                }
                None => (g.tanh(a), [r, c], da + 1),
            },
            9 => match partner(&|n| n.shape[0] == c) {
                Some(bi) => {
                    let cols = pool[bi].shape[1];
                    let d = da.max(pool[bi].depth) + 1;
                    (g.matmul(a, pool[bi].id), [r, cols], d)
                }
                None if room => {
                    let cols = rng.random_range(1..=4);
                    let b = new_leaf(&mut g, &mut leaves, [c, cols], &mut rng);
                    (g.matmul(a, b), [r, cols], da + 1)
                }
                None => (g.sigmoid(a), [r, c], da + 1),
            },
            10 if room => {
                let b = new_leaf(&mut g, &mut leaves, [1, c], &mut rng);
                (g.add_row(a, b), [r, c], da + 1)
            }
            11 if r * c <= 8 => match partner(&|n| n.shape[0] * n.shape[1] <= 8 && n.id != a) {
                Some(bi) => {
                    let [br, bc] = pool[bi].shape;
                    let d = da.max(pool[bi].depth) + 1;
                    (g.outer(a, pool[bi].id), [r * c, br * bc], d)
                }
                None => (g.softmax(a), [r, c], da + 1),
            },
            12 => match partner(&|n| n.shape[0] == r && n.id != a) {
                Some(bi) => {
                    let d = da.max(pool[bi].depth) + 1;
                    let cols = c + pool[bi].shape[1];
                    (g.concat(&[a, pool[bi].id]), [r, cols], d)
                }
                None => {
                    let idx: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..r)).collect();
                    let rows = idx.len();
                    (g.index_select(a, idx), [rows, c], da + 1)
                }
            },
            _ => match partner(&|n| n.id != a) {
                Some(bi) if da.max(pool[bi].depth) + 2 <= MAX_OP_DEPTH => {
                    let s = g.mean(pool[bi].id);
                    (g.scale_by(s, a), [r, c], da.max(pool[bi].depth) + 2)
                }
                _ => (g.tanh(a), [r, c], da + 1),
            },
        };
        if depth <= MAX_OP_DEPTH {
            pool.push(Node { id, shape, depth });
        }
    }
    let out = pool.iter().max_by_key(|n| (n.depth, n.id)).unwrap();
    let weights = g.constant(Tensor::uniform(&out.shape, 1.0, &mut rng));
    let weighted = g.mul(out.id, weights);
    let s = g.sum(weighted);
    let n_params = leaves.iter().map(|(_, t)| t.numel()).sum();
    let depth = out.depth + 2;
    RandomGraph { graph: g, leaves, seed: s, n_params, depth }
}


/// Worst relative error over the graphs drawn from `seeds`, after checking
/// each graph's size and depth bounds.
pub fn check_random_graphs(seeds: std::ops::Range<u64>) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in seeds {
        let rg = random_graph(seed);
        if rg.n_params > MAX_PARAMS || rg.depth > 6 {
            return Err(format!("graph {seed}: {} params, depth {}", rg.n_params, rg.depth));
        }
        let mut b = Bindings::new();
        for (id, t) in &rg.leaves {
            b.bind(*id, t);
        }
        let err = finite_diff_check(&rg.graph, &b, rg.seed, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    Ok(worst)
}
