//! Finite-difference catalogue covering every differentiable tape primitive.
//! Shared by the tensor gradient tests and the workspace acceptance suite.

use gama_tensor::{finite_diff_check, Activation, Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;

type Op = fn(&mut Tape<f64>, Var, &[Vec<f64>]) -> gama_tensor::Result<Var>;

pub struct Primitive {
    pub name: &'static str,
    /// Shape of the differentiated input.
    pub shape: &'static [usize],
    /// Extra constant operands, drawn per instance.
    pub extra: &'static [usize],
    /// Values closer than this to a kink are pushed away from it.
    pub kinks: &'static [f64],
    pub op: Op,
}

fn c(t: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> gama_tensor::Result<Var> {
    t.constant(shape, v.to_vec())
}

/// Random linear readout so vector outputs reduce to a scalar with a dense gradient.
fn read(t: &mut Tape<f64>, y: Var, w: &[f64]) -> gama_tensor::Result<Var> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = t.constant(&shape, w[..n].to_vec())?;
    t.dot(y, w)
}

const R: usize = 128;

pub fn catalogue() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "add",
            shape: &[6],
            extra: &[6, R],
            kinks: &[],
            op: |t, x, e| {
                let b = c(t, &[6], &e[0])?;
                let y = t.add(x, b)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "add_rhs",
            shape: &[6],
            extra: &[6, R],
            kinks: &[],
            op: |t, x, e| {
                let a = c(t, &[6], &e[0])?;
                let y = t.add(a, x)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "sub",
            shape: &[6],
            extra: &[6, R],
            kinks: &[],
            op: |t, x, e| {
                let b = c(t, &[6], &e[0])?;
                let y = t.sub(b, x)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "mul",
            shape: &[6],
            extra: &[6, R],
            kinks: &[],
            op: |t, x, e| {
                let b = c(t, &[6], &e[0])?;
                let y = t.mul(x, b)?;
                let y = t.mul(y, x)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "scale",
            shape: &[5],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.scale(x, -1.7)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "add_scalar",
            shape: &[5],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.add_scalar(x, 0.3)?;
                let y = t.mul(y, y)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "mul_scalar",
            shape: &[1],
            extra: &[5, R],
            kinks: &[],
            op: |t, s, e| {
                let a = c(t, &[5], &e[0])?;
                let y = t.mul_scalar(a, s)?;
                let y = t.mul(y, y)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "mul_scalar_lhs",
            shape: &[5],
            extra: &[1, R],
            kinks: &[],
            op: |t, x, e| {
                let s = c(t, &[1], &e[0])?;
                let y = t.mul_scalar(x, s)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "add_channel_bias",
            shape: &[3],
            extra: &[12, R],
            kinks: &[],
            op: |t, b, e| {
                let x = c(t, &[3, 2, 2], &e[0])?;
                let y = t.add_channel_bias(x, b)?;
                let y = t.mul(y, y)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "leaky_relu",
            shape: &[8],
            extra: &[R],
            kinks: &[0.0],
            op: |t, x, e| {
                let y = t.activation(x, Activation::FUSED_LEAKY)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "relu",
            shape: &[8],
            extra: &[R],
            kinks: &[0.0],
            op: |t, x, e| {
                let y = t.activation(x, Activation::Relu)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "sigmoid",
            shape: &[8],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.activation(x, Activation::Sigmoid)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "tanh",
            shape: &[8],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.activation(x, Activation::Tanh)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "softplus",
            shape: &[8],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.activation(x, Activation::Softplus)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "clamp",
            shape: &[8],
            extra: &[R],
            kinks: &[-0.5, 0.5],
            op: |t, x, e| {
                let y = t.clamp(x, -0.5, 0.5)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "log",
            shape: &[6],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.mul(x, x)?;
                let y = t.add_scalar(y, 0.5)?;
                let y = t.log(y)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "exp",
            shape: &[6],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.exp(x)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "project_linf",
            shape: &[8],
            extra: &[R],
            // Centre 0.5, radius 0.2 puts the clip points at 0.3 and 0.7.
            kinks: &[-0.7, -0.3, 0.3, 0.7],
            op: |t, x, e| {
                let y = t.project_linf(x, &[0.5; 8], 0.2)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "matmul_lhs",
            shape: &[3, 4],
            extra: &[8, R],
            kinks: &[],
            op: |t, a, e| {
                let b = c(t, &[4, 2], &e[0])?;
                let y = t.matmul(a, b)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "matmul_rhs",
            shape: &[4, 2],
            extra: &[12, R],
            kinks: &[],
            op: |t, b, e| {
                let a = c(t, &[3, 4], &e[0])?;
                let y = t.matmul(a, b)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "matvec_w",
            shape: &[3, 4],
            extra: &[4, R],
            kinks: &[],
            op: |t, w, e| {
                let x = c(t, &[4], &e[0])?;
                let y = t.matvec(w, x)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "matvec_x",
            shape: &[4],
            extra: &[12, R],
            kinks: &[],
            op: |t, x, e| {
                let w = c(t, &[3, 4], &e[0])?;
                let y = t.matvec(w, x)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "transpose",
            shape: &[2, 3],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.transpose(x)?;
                let y = t.mul(y, y)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "reshape",
            shape: &[6],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.reshape(x, &[2, 3])?;
                let y = t.mul(y, y)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "conv2d_input",
            shape: &[2, 5, 5],
            extra: &[54, R],
            kinks: &[],
            op: |t, x, e| {
                let w = c(t, &[3, 2, 3, 3], &e[0])?;
                let y = t.conv2d(x, w, 1, 1)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "conv2d_weight",
            shape: &[3, 2, 3, 3],
            extra: &[50, R],
            kinks: &[],
            op: |t, w, e| {
                let x = c(t, &[2, 5, 5], &e[0])?;
                let y = t.conv2d(x, w, 2, 1)?;
                read(t, y, &e[1])
            },
        },
        Primitive {
            name: "global_avg_pool",
            shape: &[2, 3, 3],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.mul(x, x)?;
                let y = t.global_avg_pool(y)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "upsample2x",
            shape: &[2, 2, 3],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.upsample2x(x)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "sum",
            shape: &[7],
            extra: &[],
            kinks: &[],
            op: |t, x, _| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
        },
        Primitive {
            name: "mean",
            shape: &[7],
            extra: &[],
            kinks: &[],
            op: |t, x, _| {
                let y = t.exp(x)?;
                t.mean(y)
            },
        },
        Primitive {
            name: "dot",
            shape: &[7],
            extra: &[7],
            kinks: &[],
            op: |t, x, e| {
                let b = c(t, &[7], &e[0])?;
                t.dot(x, b)
            },
        },
        Primitive {
            name: "sum_squares",
            shape: &[7],
            extra: &[],
            kinks: &[],
            op: |t, x, _| t.sum_squares(x),
        },
        Primitive {
            name: "norm",
            shape: &[7],
            extra: &[],
            kinks: &[],
            op: |t, x, _| t.norm(x),
        },
        Primitive {
            name: "normalize_l2",
            shape: &[7],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.normalize_l2(x)?;
                read(t, y, &e[0])
            },
        },
        Primitive {
            name: "cosine_similarity",
            shape: &[7],
            extra: &[7],
            kinks: &[],
            op: |t, x, e| {
                let b = c(t, &[7], &e[0])?;
                t.cosine_similarity(x, b)
            },
        },
        Primitive {
            name: "log_softmax_rows",
            shape: &[3, 4],
            extra: &[R],
            kinks: &[],
            op: |t, x, e| {
                let y = t.log_softmax_rows(x)?;
                read(t, y, &e[0])
            },
        },
    ]
}

fn draw(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

/// Worst relative error of `p` over `instances` random points.
pub fn worst_error(p: &Primitive, instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = Rng::substream(i, 77);
        let n: usize = p.shape.iter().product();
        let point: Vec<f64> = draw(&mut rng, n)
            .into_iter()
            .map(|v| {
                let mut v = v;
                for &k in p.kinks {
                    if (v - k).abs() < 0.02 {
                        v = k + 0.02f64.copysign(v - k);
                    }
                }
                v
            })
            .collect();
        let extra: Vec<Vec<f64>> = p.extra.iter().map(|&m| draw(&mut rng, m)).collect();
        let point = Tensor::new(p.shape.to_vec(), point).expect("catalogue shape");
        let err = finite_diff_check(|t, x| (p.op)(t, x, &extra), &point, STEP)
            .unwrap_or_else(|e| panic!("{}: {e}", p.name));
        worst = worst.max(err);
    }
    worst
}
