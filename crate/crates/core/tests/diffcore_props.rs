use std::sync::Arc;

use ngf_core::diffcore::{grad_check, ParamStore, Tape, Tensor, Var};
use ngf_core::Result;
use proptest::prelude::*;

fn vec_tensor(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let w = Tensor::new(t.shape(y).to_vec(), (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    t.sum(m)
}

fn check(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    grad_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y)
        },
        x,
        1e-5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_primitives_pass_grad_check(x in vec_tensor(3, 4, -2.0, 2.0)) {
        let ops: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("sin", Box::new(|t: &mut Tape, v| t.sin(v))),
            ("cos", Box::new(|t: &mut Tape, v| t.cos(v))),
            ("tanh", Box::new(|t: &mut Tape, v| t.tanh(v))),
            ("sigmoid", Box::new(|t: &mut Tape, v| t.sigmoid(v))),
            ("softplus", Box::new(|t: &mut Tape, v| t.softplus(v))),
            ("softmax", Box::new(|t: &mut Tape, v| t.softmax(v))),
            ("norm_rows", Box::new(|t: &mut Tape, v| t.norm_rows(v))),
            ("cumsum_exclusive", Box::new(|t: &mut Tape, v| t.cumsum_exclusive(v))),
            ("sum_last", Box::new(|t: &mut Tape, v| t.sum_last(v))),
            ("gather_rows", Box::new(|t: &mut Tape, v| t.gather_rows(v, Arc::new(vec![1, 1, 0])))),
            ("square", Box::new(|t: &mut Tape, v| t.mul(v, v))),
        ];
        for (name, f) in ops {
            let err = check(&x, f);
            prop_assert!(err <= 1e-6, "{name}: {err}");
        }
        // Compositions through exp are held to the looser bound.
        let err = check(&x, |t, v| t.exp(v));
        prop_assert!(err <= 1e-5, "exp: {err}");
    }

    #[test]
    fn ln_passes_grad_check_in_domain(x in vec_tensor(2, 5, 0.1, 3.0)) {
        let err = check(&x, |t, v| t.ln(v));
        prop_assert!(err <= 1e-6, "ln: {err}");
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(x in vec_tensor(2, 3, -1.5, 1.5)) {
        let grad = |which: u8| -> Tensor {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let a = t.sin(v).unwrap();
            let a = t.sum(a).unwrap();
            let sq = t.mul(v, v).unwrap();
            let b = t.mean(sq).unwrap();
            let loss = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(loss).unwrap().wrt(v)
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for i in 0..gs.len() {
            prop_assert_eq!(gs.data()[i], ga.data()[i] + gb.data()[i]);
        }
    }

    #[test]
    fn parameters_off_the_loss_path_get_zero(x in vec_tensor(2, 2, -1.0, 1.0)) {
        let mut store = ParamStore::new();
        let used = store.add("used", x.clone());
        let _unused = store.add("unused", x.clone());
        let mut t = Tape::new();
        let p = store.bind(&mut t, true);
        let s = t.tanh(p[used]).unwrap();
        let loss = t.sum(s).unwrap();
        let mut g = t.backward(loss).unwrap();
        // Gradients come back in insertion order.
        let grads = store.gradients(&p, &mut g);
        prop_assert!(grads[1].data().iter().all(|&v| v == 0.0));
        prop_assert!(grads[0].data().iter().any(|&v| v != 0.0));
    }
}
