//! Stress coverage: the case studies under varied sizes, tile shapes and
//! input seeds, plus spec-pinned mini examples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use systolic::externs::Registry;
use systolic::layout::{instantiate_pes, ScheduledProgram};
use systolic::value::{Binding, Scalar, Tensor};
use systolic::verify::{build_and_run, differential_check, CheckOptions};

fn registry() -> Registry {
    Registry::with_builtins()
}

fn check(program: &systolic::ir::Program, schedule: &systolic::schedule::Schedule, b: &Binding) {
    let report = differential_check(program, schedule, b, &registry(), &CheckOptions::default());
    assert!(report.pass, "{}", report.render());
}

#[test]
fn sgemm_varied_shapes() {
    let (p, s) = systolic::examples::load("sgemm").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // (I, J, K, II, JJ, KK, III, JJJ, KKK)
    let shapes = [
        (8, 8, 8, 4, 4, 4, 2, 2, 2),
        (8, 8, 8, 4, 4, 4, 1, 2, 1),
        (8, 4, 8, 8, 4, 4, 2, 2, 2),
        (4, 4, 4, 4, 4, 4, 2, 2, 2),
        (8, 8, 4, 2, 2, 2, 1, 1, 1),
        (16, 8, 8, 4, 4, 4, 2, 2, 2),
    ];
    for (i, j, k, ii, jj, kk, iii, jjj, kkk) in shapes {
        let mut b = Binding::new();
        b.set_scalar("I", i).set_scalar("J", j).set_scalar("K", k);
        b.set_scalar("II", ii).set_scalar("JJ", jj).set_scalar("KK", kk);
        b.set_scalar("III", iii).set_scalar("JJJ", jjj).set_scalar("KKK", kkk);
        b.set_tensor(
            "A",
            systolic::examples::random_int_matrix_f(i as usize, k as usize, &mut rng),
        );
        b.set_tensor(
            "B",
            systolic::examples::random_int_matrix_f(k as usize, j as usize, &mut rng),
        );
        check(&p, &s, &b);
    }
}

#[test]
fn smith_waterman_varied_shapes() {
    let (p, s) = systolic::examples::load("smith-waterman").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // (I, J, II, JJ): including the 2x2 array and non-square tiles.
    let shapes = [(4, 4, 2, 2), (8, 8, 4, 4), (12, 8, 4, 4), (8, 4, 2, 4), (6, 6, 3, 2)];
    for (i, j, ii, jj) in shapes {
        let mut b = Binding::new();
        b.set_scalar("I", i).set_scalar("J", j);
        b.set_scalar("II", ii).set_scalar("JJ", jj).set_scalar("MAX_J", 16);
        b.set_tensor("T", systolic::examples::random_symbol_seq(i as usize, &mut rng));
        b.set_tensor("S", systolic::examples::random_symbol_seq(j as usize, &mut rng));
        check(&p, &s, &b);
        // PE count is the product of the unrolled extents.
        let sp = ScheduledProgram::build(&p, &s).unwrap();
        let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
        assert_eq!(graph.pes_of("A").len(), (ii * jj) as usize);
    }
}

#[test]
fn conv_relu_varied_shapes() {
    let (p, s) = systolic::examples::load("conv-relu").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    // (Nof, Noy, Nox, Nif, Nky, Nkx, S, Tof, Toy, Pof, Poy, Pox)
    let shapes = [
        (4, 4, 4, 2, 3, 3, 1, 2, 2, 2, 2, 2),
        (2, 4, 4, 1, 3, 3, 1, 2, 4, 1, 2, 2),
        (4, 6, 6, 2, 3, 3, 2, 2, 3, 2, 3, 3),
        (4, 4, 2, 2, 2, 2, 1, 4, 2, 2, 1, 2),
    ];
    for (nof, noy, nox, nif, nky, nkx, stride, tof, toy, pof, poy, pox) in shapes {
        let mut b = Binding::new();
        b.set_scalar("Nof", nof)
            .set_scalar("Noy", noy)
            .set_scalar("Nox", nox)
            .set_scalar("Nif", nif)
            .set_scalar("Nky", nky)
            .set_scalar("Nkx", nkx)
            .set_scalar("S", stride);
        b.set_scalar("Tof", tof)
            .set_scalar("Toy", toy)
            .set_scalar("Pof", pof)
            .set_scalar("Poy", poy)
            .set_scalar("Pox", pox);
        let rows = ((noy - 1) * stride + nky) as usize;
        let cols = ((nox - 1) * stride + nkx) as usize;
        b.set_tensor(
            "input",
            systolic::examples::random_int_tensor(&[nif as usize, rows, cols], &mut rng),
        );
        b.set_tensor(
            "weight",
            systolic::examples::random_int_tensor(
                &[nof as usize, nif as usize, nky as usize, nkx as usize],
                &mut rng,
            ),
        );
        b.set_tensor(
            "bias",
            systolic::examples::random_int_tensor(&[nof as usize], &mut rng),
        );
        check(&p, &s, &b);
    }
}

#[test]
fn mergesort_varied_shapes() {
    let (p, s) = systolic::examples::load("mergesort").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for (l, sz) in [(2i64, 4i64), (3, 4), (3, 2), (4, 3)] {
        let streams = 1usize << (l - 1) as usize;
        let mut data = Vec::new();
        for _ in 0..streams * 2 {
            let mut row: Vec<i64> = (0..sz).map(|_| rng.gen_range(-50..50)).collect();
            row.sort_unstable();
            data.push(row);
        }
        let t = Tensor {
            elem: systolic::value::ElemType::Int,
            origin: vec![0, 0],
            shape: vec![streams * 2, sz as usize],
            data: data.into_iter().flatten().map(Scalar::Int).collect(),
        };
        let mut b = Binding::new();
        b.set_scalar("L", l).set_scalar("S", sz);
        b.set_tensor("input", t.clone());
        let (outputs, _, graph) =
            build_and_run(&p, &s, &b, &registry(), &CheckOptions::default()).unwrap();
        let got: Vec<i64> = outputs.outputs["out"]
            .data
            .iter()
            .map(|v| v.as_index().unwrap())
            .collect();
        let mut want: Vec<i64> = t.data.iter().map(|v| v.as_index().unwrap()).collect();
        want.sort_unstable();
        assert_eq!(got, want, "L={l} S={sz}");
        assert_eq!(graph.pes_of("out").len(), (1usize << l as usize) - 1);
    }
}

#[test]
fn spmv_varied_slots() {
    let (p, s) = systolic::examples::load("spmv").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for (slots, accs) in [(2i64, 1i64), (4, 2), (4, 4), (8, 2)] {
        let rows = rng.gen_range(slots as usize..=3 * slots as usize);
        let cols = rng.gen_range(6..=20usize);
        let dense = systolic::examples::random_sparse_dense(rows, cols, 0.3, &mut rng);
        let x: Vec<f64> = (0..cols).map(|_| rng.gen_range(-3..=3) as f64).collect();
        let pre = systolic::examples::preprocess_sparse(&dense, slots as usize);
        let mut b = Binding::new();
        b.set_scalar("NUM_SLOTS", slots).set_scalar("NUM_ACCS", accs);
        b.set_scalar("C", pre.padded_cols as i64);
        b.set_scalar("NUM_ROWS", rows as i64);
        b.set_tensor("Ap", pre.values);
        b.set_tensor("column_ids", pre.column_ids);
        b.set_tensor("row_lengths", pre.row_lengths);
        b.set_tensor("x", Tensor::from_vec_f64(&x));
        let (outputs, _, _) =
            build_and_run(&p, &s, &b, &registry(), &CheckOptions::default()).unwrap();
        let y = &outputs.outputs["y"];
        let want = systolic::examples::dense_matvec(&dense, &x);
        for (i, w) in want.iter().enumerate() {
            let g = y.get(&[i as i64]).map(|v| v.as_f64()).unwrap_or(0.0);
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "slots={slots} row {i}");
        }
    }
}

/// The three-stage pipeline keeps every channel busy: once warmed up, each
/// channel has seen at least one token.
#[test]
fn pipeline_channels_all_carry_tokens() {
    let mut b = Binding::new();
    b.set_scalar("I", 3);
    b.set_tensor("B", Tensor::from_vec_f64(&[3.0, -1.0, 7.0]));
    let (p, s) = systolic::examples::load("fig4").unwrap();
    let (outputs, trace, graph) =
        build_and_run(&p, &s, &b, &registry(), &CheckOptions::default()).unwrap();
    let a = &outputs.outputs["A"];
    assert_eq!(
        a.data,
        vec![Scalar::Float(-3.0), Scalar::Float(1.0), Scalar::Float(-7.0)]
    );
    for ci in graph.register_channels() {
        assert!(trace.channels[ci].max_occupancy >= 1, "channel {ci} never used");
    }
}

use rand::Rng;
