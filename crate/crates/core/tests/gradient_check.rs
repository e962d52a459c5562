//! Analytic gradients against central finite differences (h = 1e-5).

use unlearn_core::graph::{Graph, Var};
use unlearn_core::losses::{self, LabelSplit};
use unlearn_core::models::{self, Binding, ClassifierSpec, GeneratorSpec};
use unlearn_core::rng::{sample_noise, Rng};
use unlearn_core::{ParameterSet, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares backward against finite differences for every scalar in `params`.
fn check_params(params: &ParameterSet, loss: impl Fn(&ParameterSet, &mut Graph) -> Var) {
    let mut analytic = params.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let l = loss(&analytic, &mut g);
    g.backward(l, &mut analytic).unwrap();

    let eval = |ps: &ParameterSet| {
        let mut g = Graph::new();
        let l = loss(ps, &mut g);
        g.value(l).item()
    };
    for (idx, p) in params.iter().enumerate() {
        for j in 0..p.value.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.iter_mut().nth(idx).unwrap().value.data_mut()[j] += H;
            minus.iter_mut().nth(idx).unwrap().value.data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let got = analytic.entry(idx).grad.data()[j];
            assert!(
                rel_err(got, numeric) < TOL,
                "{}[{j}]: analytic {got} vs numeric {numeric}",
                p.name
            );
        }
    }
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    sample_noise(rng, rows, cols)
}

fn project(g: &mut Graph, v: Var, rng: &mut Rng) -> Var {
    let shape = g.value(v).shape().to_vec();
    let r = g.constant(random(rng, shape[0], shape[1]));
    let m = g.mul(v, r).unwrap();
    g.sum(m)
}

#[test]
fn elementwise_and_matrix_ops() {
    let mut rng = Rng::new(101);
    let mut ps = ParameterSet::new();
    ps.insert("a", random(&mut rng, 3, 4)).unwrap();
    ps.insert("b", random(&mut rng, 4, 2)).unwrap();
    ps.insert("c", random(&mut rng, 3, 4)).unwrap();
    ps.insert("bias", random(&mut rng, 1, 4)).unwrap();
    let seed = rng.next_u64();

    type OpFn = fn(&mut Graph, Var, Var, Var, Var) -> Var;
    let ops: Vec<(&str, OpFn)> = vec![
        ("matmul", |g, a, b, _, _| g.matmul(a, b).unwrap()),
        ("add", |g, a, _, c, _| g.add(a, c).unwrap()),
        ("sub", |g, a, _, c, _| g.sub(a, c).unwrap()),
        ("mul", |g, a, _, c, _| g.mul(a, c).unwrap()),
        ("relu", |g, a, _, _, _| g.relu(a)),
        ("tanh", |g, a, _, _, _| g.tanh(a)),
        ("scale", |g, a, _, _, _| g.scale(a, -1.7)),
        ("add_row", |g, a, _, _, bias| g.add_row(a, bias).unwrap()),
        ("log_softmax", |g, a, _, _, _| g.log_softmax(a).unwrap()),
        ("softmax", |g, a, _, _, _| g.softmax(a).unwrap()),
        ("mean_rows", |g, a, _, _, _| g.mean_rows(a).unwrap()),
    ];
    for (name, op) in ops {
        eprintln!("checking {name}");
        check_params(&ps, |ps, g| {
            let mut r = Rng::new(seed);
            let [a, b, c, bias] = ["a", "b", "c", "bias"].map(|n| g.param(ps, n).unwrap());
            let out = op(g, a, b, c, bias);
            project(g, out, &mut r)
        });
    }
}

#[test]
fn trivial_backward_cases() {
    let mut ps = ParameterSet::new();
    let p = Tensor::from_rows(&[vec![1.5, -2.0, 0.25]]);
    ps.insert("p", p.clone()).unwrap();

    let mut g = Graph::new();
    let v = g.param(&ps, "p").unwrap();
    let s = g.sum(v);
    g.backward(s, &mut ps).unwrap();
    assert_eq!(ps.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);

    // repeated backward accumulates
    g.backward(s, &mut ps).unwrap();
    assert_eq!(ps.grad("p").unwrap().data(), &[2.0, 2.0, 2.0]);

    ps.zero_grads();
    let mut g = Graph::new();
    let v = g.param(&ps, "p").unwrap();
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half, &mut ps).unwrap();
    assert_eq!(ps.grad("p").unwrap(), &p);
}

#[test]
fn unreachable_params_keep_zero_grad_and_non_scalar_rejected() {
    let mut ps = ParameterSet::new();
    ps.insert("used", Tensor::filled(&[1, 2], 1.0)).unwrap();
    ps.insert("unused", Tensor::filled(&[1, 2], 1.0)).unwrap();
    let mut g = Graph::new();
    let u = g.param(&ps, "used").unwrap();
    let _ = g.param(&ps, "unused").unwrap();
    assert!(g.backward(u, &mut ps).is_err());
    let s = g.sum(u);
    g.backward(s, &mut ps).unwrap();
    assert!(ps.grad("unused").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut ps = ParameterSet::new();
    ps.insert("x", Tensor::from_rows(&[vec![-1.0, 0.0, 2.0]])).unwrap();
    let mut g = Graph::new();
    let x = g.param(&ps, "x").unwrap();
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(r);
    g.backward(s, &mut ps).unwrap();
    assert_eq!(ps.grad("x").unwrap().data(), &[0.0, 0.0, 1.0]);
}

fn student_spec() -> ClassifierSpec {
    ClassifierSpec::new(3, vec![6], 4).unwrap()
}

fn generator_spec() -> GeneratorSpec {
    GeneratorSpec {
        noise_dim: 2,
        hidden_dims: vec![5],
        output_dim: 3,
        lo: -2.0,
        hi: 3.0,
    }
}

struct Fixture {
    teacher: ParameterSet,
    student: ParameterSet,
    generator: ParameterSet,
    z: Tensor,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = Rng::new(seed);
    let mut teacher = models::init_network(&student_spec(), &mut rng).unwrap();
    for p in teacher.iter_mut() {
        p.value = p.value.scale(2.0);
    }
    Fixture {
        teacher,
        student: models::init_network(&student_spec(), &mut rng).unwrap(),
        generator: models::init_network(&generator_spec(), &mut rng).unwrap(),
        z: sample_noise(&mut rng, 5, 2),
    }
}

#[test]
fn student_side_kd_gradients_on_three_networks() {
    for seed in [1, 2, 3] {
        let f = fixture(seed);
        let x = models::generate(&f.generator, &generator_spec(), &f.z).unwrap();
        let t_logits = models::classifier_logits(&f.teacher, &student_spec(), &x).unwrap();
        let t_probs = t_logits.softmax().unwrap();
        check_params(&f.student, |ps, g| {
            let xv = g.constant(x.clone());
            let tv = g.constant(t_probs.clone());
            let s = models::classifier_logits_graph(g, ps, &student_spec(), xv, Binding::Trainable).unwrap();
            let lp = g.log_softmax(s).unwrap();
            losses::kd_loss(g, tv, lp).unwrap().node
        });
        let split = LabelSplit::new(4, [1]).unwrap();
        check_params(&f.student, |ps, g| {
            let xv = g.constant(x.clone());
            let s = models::classifier_logits_graph(g, ps, &student_spec(), xv, Binding::Trainable).unwrap();
            let lp = g.log_softmax(s).unwrap();
            losses::postfilter_kd_loss(g, &t_logits, lp, &split).unwrap().node
        });
    }
}

#[derive(Clone, Copy, Debug)]
enum GenLoss {
    Adv,
    Is,
    Balance,
}

#[test]
fn generator_side_gradients_through_frozen_networks() {
    let split = LabelSplit::new(4, [0, 2]).unwrap();
    for seed in [4, 5, 6] {
        let f = fixture(seed);
        for kind in [GenLoss::Adv, GenLoss::Is, GenLoss::Balance] {
            eprintln!("seed {seed} {kind:?}");
            check_params(&f.generator, |ps, g| {
                let zv = g.constant(f.z.clone());
                let x = models::generate_graph(g, ps, &generator_spec(), zv, Binding::Trainable).unwrap();
                let t = models::classifier_logits_graph(g, &f.teacher, &student_spec(), x, Binding::Frozen).unwrap();
                let tp = g.softmax(t).unwrap();
                let s = models::classifier_logits_graph(g, &f.student, &student_spec(), x, Binding::Frozen).unwrap();
                let sl = g.log_softmax(s).unwrap();
                match kind {
                    GenLoss::Adv => losses::adv_loss(g, tp, sl).unwrap().node,
                    GenLoss::Is => losses::is_loss(g, tp, sl, &split).unwrap().node,
                    GenLoss::Balance => losses::balance_loss(g, tp).unwrap().node,
                }
            });
        }
    }
}

#[test]
fn generator_output_gradient() {
    let f = fixture(9);
    check_params(&f.generator, |ps, g| {
        let zv = g.constant(f.z.clone());
        let x = models::generate_graph(g, ps, &generator_spec(), zv, Binding::Trainable).unwrap();
        let mut r = Rng::new(77);
        project(g, x, &mut r)
    });
}

#[test]
fn frozen_networks_receive_no_gradient() {
    let mut f = fixture(10);
    let before = f.teacher.checksum();
    let mut g = Graph::new();
    let zv = g.constant(f.z.clone());
    let x = models::generate_graph(&mut g, &f.generator, &generator_spec(), zv, Binding::Trainable).unwrap();
    let t = models::classifier_logits_graph(&mut g, &f.teacher, &student_spec(), x, Binding::Frozen).unwrap();
    let tp = g.softmax(t).unwrap();
    let s = models::classifier_logits_graph(&mut g, &f.student, &student_spec(), x, Binding::Frozen).unwrap();
    let sl = g.log_softmax(s).unwrap();
    let l = losses::adv_loss(&mut g, tp, sl).unwrap();
    g.backward(l.node, &mut f.teacher).unwrap();
    g.backward(l.node, &mut f.student).unwrap();
    assert!(f.teacher.iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    assert!(f.student.iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    assert_eq!(f.teacher.checksum(), before);
}
