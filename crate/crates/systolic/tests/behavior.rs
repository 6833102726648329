//! Behavior tests for the graph builder and simulator: reduction firing,
//! deadlock reporting, depth inference, quiescence, buffers and error paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use systolic::error::{LayoutError, SimError};
use systolic::externs::Registry;
use systolic::ir::expr::Expr;
use systolic::ir::{Parameter, Placement, Program};
use systolic::layout::{
    infer_channel_depths, instantiate_pes, ChannelKind, Endpoint, ScheduledProgram,
};
use systolic::schedule::{static_legality_check, Directive, Schedule};
use systolic::sim::{run, RunConfig};
use systolic::value::{Binding, ElemType, Scalar, Tensor};
use systolic::verify::{differential_check, CheckOptions};

fn registry() -> Registry {
    Registry::with_builtins()
}

fn reduction_program(k: i64) -> (Program, Binding) {
    let mut p = Program::new();
    p.add_parameter(Parameter::matrix("x", ElemType::Int, 2))
        .unwrap();
    p.add_var("i").unwrap();
    p.add_var("k").unwrap();
    p.add_func("F", Placement::Device).unwrap();
    p.add_definition("F", vec![Expr::var("i")], Expr::int(0), false)
        .unwrap();
    p.add_definition(
        "F",
        vec![Expr::var("i")],
        Expr::param("x", vec![Expr::var("i"), Expr::var("k")]),
        true,
    )
    .unwrap();
    p.set_bounds("F", "i", Expr::int(0), Expr::int(2)).unwrap();
    p.set_bounds("F", "k", Expr::int(0), Expr::int(k)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut b = Binding::new();
    b.set_tensor(
        "x",
        systolic::examples::random_int_tensor(&[2, k as usize], &mut rng),
    );
    (p, b)
}

/// A reduction of length K fires K times per element but emits exactly one
/// token, when the reduction completes.
#[test]
fn reduction_emits_once_per_element() {
    for k in [1i64, 4] {
        let (p, b) = reduction_program(k);
        let sp = ScheduledProgram::build(&p, &Schedule::new()).unwrap();
        let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
        let (outputs, trace) = run(&graph, &registry(), &RunConfig::default()).unwrap();
        // Sink channel carries one token per element, not one per update.
        let sink = graph
            .channels
            .iter()
            .position(|c| matches!(c.dst, Endpoint::Host(_)))
            .unwrap();
        assert_eq!(trace.channels[sink].total_tokens, 2, "K={k}");
        let f = &outputs.outputs["F"];
        let want: Vec<i64> = (0..2)
            .map(|i| {
                (0..k)
                    .map(|kk| {
                        b.tensor("x")
                            .unwrap()
                            .get(&[i, kk])
                            .unwrap()
                            .as_index()
                            .unwrap()
                    })
                    .sum()
            })
            .collect();
        for i in 0..2i64 {
            assert_eq!(f.get(&[i]), Some(Scalar::Int(want[i as usize])));
        }
    }
}

/// Zero-trip bounds quiesce immediately with zero tokens anywhere.
#[test]
fn zero_trip_is_immediate_quiescence() {
    let mut p = Program::new();
    p.add_parameter(Parameter::matrix("x", ElemType::Int, 1))
        .unwrap();
    p.add_var("i").unwrap();
    p.add_func("F", Placement::Device).unwrap();
    p.add_definition(
        "F",
        vec![Expr::var("i")],
        Expr::param("x", vec![Expr::var("i")]),
        false,
    )
    .unwrap();
    p.set_bounds("F", "i", Expr::int(0), Expr::int(0)).unwrap();
    let mut b = Binding::new();
    b.set_tensor("x", Tensor::from_vec_i64(&[]));
    let sp = ScheduledProgram::build(&p, &Schedule::new()).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let (outputs, trace) = run(&graph, &registry(), &RunConfig::default()).unwrap();
    assert!(outputs.outputs.is_empty());
    assert!(trace.channels.iter().all(|c| c.total_tokens == 0));
}

/// A single PE with no channels completes without any deadlock report.
#[test]
fn single_pe_completes() {
    let (p, b) = reduction_program(2);
    let sp = ScheduledProgram::build(&p, &Schedule::new()).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let (_, trace) = run(&graph, &registry(), &RunConfig::default()).unwrap();
    assert!(trace.deadlock.is_none());
    assert_eq!(graph.pes_of("F").len(), 1);
}

/// Forced depth 1 on the merge tree deadlocks, and the report names a full
/// channel; inferred depths never deadlock on the same inputs.
#[test]
fn forced_min_depth_deadlocks_and_inference_recovers() {
    let (p, s) = systolic::examples::load("mergesort").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = systolic::examples::default_binding("mergesort", &mut rng).unwrap();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let mut forced = graph.clone();
    for c in forced.channels.iter_mut() {
        if c.kind == ChannelKind::Register {
            c.depth = Some(1);
        }
    }
    match run(&forced, &registry(), &RunConfig::default()) {
        Err(SimError::Deadlock(rep)) => {
            assert!(
                rep.blocked
                    .iter()
                    .any(|bp| bp.kind == systolic::sim::BlockKind::FullOutput),
                "report should name a full channel: {rep}"
            );
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
    // With inferred depths the same graph and inputs complete.
    let inferred = infer_channel_depths(&graph, &registry()).unwrap();
    run(&inferred, &registry(), &RunConfig::default()).unwrap();
    // Observed occupancy never exceeds the configured depth.
    let (_, trace) = run(&inferred, &registry(), &RunConfig::default()).unwrap();
    for (i, c) in inferred.channels.iter().enumerate() {
        if let Some(d) = c.depth {
            assert!(trace.channels[i].max_occupancy <= d);
        }
    }
}

/// A straight pipeline with matched rates needs almost no buffering.
#[test]
fn straight_pipeline_infers_small_depths() {
    let (p, s) = systolic::examples::load("fig4").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = systolic::examples::default_binding("fig4", &mut rng).unwrap();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let graph = infer_channel_depths(&graph, &registry()).unwrap();
    for ci in graph.register_channels() {
        let d = graph.channels[ci].depth.unwrap();
        assert!(d <= 2, "straight pipeline channel depth {d}");
    }
}

/// The step limit aborts runaway runs instead of hanging.
#[test]
fn step_limit_is_an_error() {
    let (p, s) = systolic::examples::load("sgemm").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = systolic::examples::default_binding("sgemm", &mut rng).unwrap();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let cfg = RunConfig {
        max_steps: 50,
        ..RunConfig::default()
    };
    match run(&graph, &registry(), &cfg) {
        Err(SimError::StepLimitExceeded(50)) => {}
        other => panic!("expected step limit, got {other:?}"),
    }
}

/// Identity schedules (no directives) always verify: the harness is sound.
#[test]
fn identity_schedule_always_passes() {
    let (p, b) = reduction_program(3);
    let report = differential_check(
        &p,
        &Schedule::new(),
        &b,
        &registry(),
        &CheckOptions::default(),
    );
    assert!(report.pass, "{}", report.render());
}

/// Tiling with factor == extent leaves interpretation unchanged.
#[test]
fn tile_factor_equals_extent_preserves_outputs() {
    let (p, b) = reduction_program(4);
    let mut s = Schedule::new();
    s.push(
        "F",
        Directive::Tile {
            args: vec![Expr::var("k"), Expr::var("kk"), Expr::int(4)],
        },
    );
    // kk must be declared for the tile to resolve.
    let mut p2 = p.clone();
    p2.add_var("kk").unwrap();
    let report = differential_check(&p2, &s, &b, &registry(), &CheckOptions::default());
    assert!(report.pass, "{}", report.render());
}

/// Unrolling a loop of extent 1 creates exactly one PE carrying the loop's
/// lower bound as its identifier.
#[test]
fn unroll_extent_one_single_pe() {
    let mut p = Program::new();
    p.add_parameter(Parameter::matrix("x", ElemType::Int, 1))
        .unwrap();
    p.add_assumption(systolic::ir::Assumption::SymbolicConstant(vec!["N".into()]))
        .unwrap();
    p.add_var("i").unwrap();
    p.add_func("F", Placement::Device).unwrap();
    p.add_definition(
        "F",
        vec![Expr::var("i")],
        Expr::param("x", vec![Expr::var("i")]),
        false,
    )
    .unwrap();
    p.set_bounds("F", "i", Expr::int(0), Expr::var("N"))
        .unwrap();
    let mut s = Schedule::new();
    s.push(
        "F",
        Directive::Unroll {
            vars: vec!["i".into()],
        },
    );
    let mut b = Binding::new();
    b.set_scalar("N", 1);
    b.set_tensor("x", Tensor::from_vec_i64(&[7]));
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let pes = graph.pes_of("F");
    assert_eq!(pes.len(), 1);
    assert_eq!(graph.pes[pes[0]].id, vec![0]);
}

/// The driver pattern: one function may be the producer of several values
/// and the consumer of the target, with distinct channels each way.
#[test]
fn driver_has_channels_both_ways() {
    let (p, s) = systolic::examples::load("smith-waterman").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = systolic::examples::default_binding("smith-waterman", &mut rng).unwrap();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    let driver = graph.pes_of("driver")[0];
    let a_in = graph
        .channels
        .iter()
        .filter(|c| c.value == "A" && c.dst == Endpoint::Pe(driver))
        .count();
    let a_out = graph
        .channels
        .iter()
        .filter(|c| c.value == "A" && c.src == Endpoint::Pe(driver))
        .count();
    assert!(a_in > 0, "driver receives A values");
    assert!(a_out > 0, "driver feeds A values");
    // PE count is the product of the unrolled iteration counts.
    assert_eq!(graph.pes_of("A").len(), 16);
}

/// Data-dependent reads must sit behind a whole-tensor buffer.
#[test]
fn dynamic_read_without_buffer_is_rejected() {
    let mut p = Program::new();
    p.add_parameter(Parameter::matrix("x", ElemType::Float, 1))
        .unwrap();
    p.add_parameter(Parameter::matrix("ids", ElemType::Int, 1))
        .unwrap();
    p.add_var("i").unwrap();
    p.add_func("F", Placement::Device).unwrap();
    p.add_definition(
        "F",
        vec![Expr::var("i")],
        Expr::param("x", vec![Expr::param("ids", vec![Expr::var("i")])]),
        false,
    )
    .unwrap();
    p.set_bounds("F", "i", Expr::int(0), Expr::int(3)).unwrap();
    let mut b = Binding::new();
    b.set_tensor("x", Tensor::from_vec_f64(&[1.0, 2.0, 3.0]));
    b.set_tensor("ids", Tensor::from_vec_i64(&[2, 0, 1]));
    let sp = ScheduledProgram::build(&p, &Schedule::new()).unwrap();
    match instantiate_pes(&sp, &b, &registry()) {
        Err(LayoutError::UnboundedFootprint { .. }) => {}
        other => panic!("expected UnboundedFootprint, got {other:?}"),
    }
    // With a whole-tensor buffer the same program runs and verifies.
    let mut s = Schedule::new();
    s.push(
        "F",
        Directive::Buffer {
            value: "x".into(),
            level: None,
            attrs: vec![],
        },
    );
    let report = differential_check(&p, &s, &b, &registry(), &CheckOptions::default());
    assert!(report.pass, "{}", report.render());
}

/// A line buffer over an access pattern with no reuse between consecutive
/// windows is rejected.
#[test]
fn non_sliding_linebuffer_is_rejected() {
    let mut p = Program::new();
    p.add_parameter(Parameter::matrix("x", ElemType::Int, 2))
        .unwrap();
    p.add_var("i").unwrap();
    p.add_var("j").unwrap();
    p.add_func("F", Placement::Device).unwrap();
    p.add_definition(
        "F",
        vec![Expr::var("i"), Expr::var("j")],
        Expr::param("x", vec![Expr::var("i"), Expr::var("j")]),
        false,
    )
    .unwrap();
    p.set_bounds("F", "i", Expr::int(0), Expr::int(3)).unwrap();
    p.set_bounds("F", "j", Expr::int(0), Expr::int(3)).unwrap();
    let mut s = Schedule::new();
    s.push(
        "F",
        Directive::LineBuffer {
            value: "x".into(),
            level: Some("i".into()),
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut b = Binding::new();
    b.set_tensor(
        "x",
        systolic::examples::random_int_tensor(&[3, 3], &mut rng),
    );
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    match instantiate_pes(&sp, &b, &registry()) {
        Err(LayoutError::NonSlidingAccess { .. }) => {}
        other => panic!("expected NonSlidingAccess, got {other:?}"),
    }
}

/// Static legality diagnostics collect everything without applying.
#[test]
fn legality_check_collects_violations() {
    let mut p = Program::new();
    p.add_parameter(Parameter::matrix("B", ElemType::Int, 1))
        .unwrap();
    p.add_var("i").unwrap();
    p.add_var("j").unwrap();
    p.add_func("F", Placement::Device).unwrap();
    p.add_definition(
        "F",
        vec![Expr::var("i"), Expr::var("j")],
        Expr::param("B", vec![Expr::var("j")]),
        false,
    )
    .unwrap();
    p.set_bounds("F", "i", Expr::int(0), Expr::int(2)).unwrap();
    p.set_bounds("F", "j", Expr::int(0), Expr::int(2)).unwrap();
    let mut s = Schedule::new();
    s.push(
        "F",
        Directive::Remove {
            vars: vec!["j".into()],
        },
    );
    s.push(
        "F",
        Directive::Relay {
            value: "B".into(),
            direction: vec![Expr::int(1)],
        },
    );
    let diags = static_legality_check(&p, &s);
    assert!(diags.iter().any(|d| d.message.contains("still used")));
    assert!(diags.iter().any(|d| d.message.contains("unrolls no loops")));
    // Nothing was applied: the program still lowers cleanly.
    assert!(systolic::ir::lower_to_loop_nest(&p, "F").is_ok());
}

/// Host functions may only sit at the memory end of a chain.
#[test]
fn host_must_be_at_memory_end() {
    let text = r#"
param B float 1
param I
var i
func A
func P1
func P2 host
A(i) = B(i)
bounds A i 0 I
A.isolate_producer_chain(B, P1, P2)
"#;
    let (p, s) = systolic::parse::parse_spec(text).unwrap();
    match ScheduledProgram::build(&p, &s) {
        Err(LayoutError::HostNotAtMemoryEnd(f)) => assert_eq!(f, "P2"),
        other => panic!("expected HostNotAtMemoryEnd, got {other:?}"),
    }
}

/// Vectorized producers put multi-lane tokens on their channels.
#[test]
fn vectorized_channels_carry_wide_tokens() {
    let (p, s) = systolic::examples::load("sgemm").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = systolic::examples::default_binding("sgemm", &mut rng).unwrap();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    // A_loader is vectorized over kkk (extent 2): its outgoing register
    // channels carry 2-wide tokens.
    let loader = graph.pes_of("A_loader")[0];
    let mut found = false;
    for c in &graph.channels {
        if c.src == Endpoint::Pe(loader) && c.kind == ChannelKind::Register {
            assert_eq!(c.width, 2);
            found = true;
        }
    }
    assert!(found, "loader has vectorized output channels");
}

/// Extern state is confined per PE: interleaved merge nodes produce the same
/// streams as the same nodes run in isolation (the whole tree sorts).
#[test]
fn extern_state_isolation_across_interleavings() {
    let (p, s) = systolic::examples::load("mergesort").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let b = systolic::examples::default_binding("mergesort", &mut rng).unwrap();
    let reg = registry();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &reg).unwrap();
    let graph = infer_channel_depths(&graph, &reg).unwrap();
    let mut outs = Vec::new();
    for seed in [3u64, 17, 99] {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let (o, _) = run(&graph, &reg, &cfg).unwrap();
        outs.push(o.outputs);
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[1], outs[2]);
}

/// A function cannot be bound to two implementations.
#[test]
fn duplicate_extern_registration_is_rejected() {
    let mut p = Program::new();
    p.add_func("F", Placement::Device).unwrap();
    let sig = systolic::externs::ExternSig {
        impl_name: "impl_a".into(),
        params: vec![],
    };
    p.set_extern("F", sig.clone()).unwrap();
    match p.set_extern("F", sig) {
        Err(systolic::error::IrError::DuplicateName(n)) => assert_eq!(n, "F"),
        other => panic!("expected DuplicateName, got {other:?}"),
    }
}

/// The row decoder faults on non-positive scheduled lengths instead of
/// wedging its counters.
#[test]
fn decoder_rejects_bad_row_lengths() {
    let reg = registry();
    let mut dec = reg.interp_instance("decoder_impl").unwrap();
    let lengths = Tensor {
        elem: ElemType::Int,
        origin: vec![0, 0],
        shape: vec![1, 1],
        data: vec![Scalar::Int(-2)],
    };
    let err = dec.call(&[
        systolic::externs::ArgValue::Tensor(lengths),
        systolic::externs::ArgValue::Scalar(Scalar::Int(0)),
    ]);
    assert!(err.is_err());
}

/// Graph structures for the two array-of-arrays case studies, and the JSON
/// export schema.
#[test]
fn conv_and_spmv_graph_structure() {
    let reg = registry();
    {
        let (p, s) = systolic::examples::load("conv-relu").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = systolic::examples::default_binding("conv-relu", &mut rng).unwrap();
        let sp = ScheduledProgram::build(&p, &s).unwrap();
        let graph = instantiate_pes(&sp, &b, &reg).unwrap();
        // Pox x Pof x Poy and Pox x Pof arrays.
        assert_eq!(graph.pes_of("convolution").len(), 8);
        assert_eq!(graph.pes_of("ReLU").len(), 4);
        for f in ["input_loader", "input_feeder", "weight_loader", "weight_feeder", "bias_feeder"] {
            assert_eq!(graph.pes_of(f).len(), 1, "{f}");
        }
        let j = systolic::layout::to_json(&graph);
        assert!(j["pes"].as_array().unwrap().len() >= 17);
        assert!(j["channels"].as_array().is_some());
    }
    {
        let (p, s) = systolic::examples::load("spmv").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let b = systolic::examples::default_binding("spmv", &mut rng).unwrap();
        let sp = ScheduledProgram::build(&p, &s).unwrap();
        let graph = instantiate_pes(&sp, &b, &reg).unwrap();
        assert_eq!(graph.pes_of("product").len(), 4, "one product PE per slot");
        assert_eq!(graph.pes_of("y").len(), 2, "one accumulator per NUM_ACCS");
        assert_eq!(graph.pes_of("decoder").len(), 1);
        assert_eq!(graph.pes_of("matrix_fetcher").len(), 1);
    }
}

/// The drain chain's reorder reads innermost-first: reorder(jj, jjj, iii)
/// leaves jj innermost so columns drain round-robin.
#[test]
fn collector_reorder_puts_jj_innermost() {
    let (p, s) = systolic::examples::load("sgemm").unwrap();
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let nest = sp.funcs["C_collector"].nest.as_ref().unwrap();
    let order: Vec<&str> = nest.loops.iter().map(|l| l.var.as_str()).collect();
    assert_eq!(order, vec!["i", "j", "ii", "iii", "jjj", "jj"]);
}

/// Verification reports serialize to JSON for tooling.
#[test]
fn verify_report_serializes() {
    let (p, b) = reduction_program(2);
    let report = differential_check(&p, &Schedule::new(), &b, &registry(), &CheckOptions::default());
    let j = report.to_json();
    assert_eq!(j["pass"], serde_json::Value::Bool(true));
    assert!(j["funcs"].as_array().is_some());
}

/// One-dimensional running recurrence through a tiled, unrolled array with a
/// feedback driver: cross-tile values leave and re-enter the array.
#[test]
fn one_dimensional_recurrence_with_driver() {
    let text = r#"
param T int 1
param I
assume symbolic_constant(II)
assume divisible(I, II)
var i ii
func A
func driver
A(-1) = 0
A(i) = A(i - 1) + T(i - 1)
bounds A i 0 I
A.tile(i, ii, II)
A.isolate_producer_chain(A, driver).isolate_consumer_chain(A, driver)
A.unroll(ii).relay(A, <1>)
"#;
    let (p, s) = systolic::parse::parse_spec(text).unwrap();
    for (i_ext, ii_ext) in [(8i64, 4i64), (6, 2), (4, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut b = Binding::new();
        b.set_scalar("I", i_ext).set_scalar("II", ii_ext);
        b.set_tensor("T", systolic::examples::random_symbol_seq(i_ext as usize, &mut rng));
        let report = differential_check(&p, &s, &b, &registry(), &CheckOptions::default());
        assert!(report.pass, "I={i_ext} II={ii_ext}:\n{}", report.render());
    }
}

/// Isolation with no unrolling at all: the basic layout runs the whole nest
/// on one PE and still drains every element through the driver.
#[test]
fn isolation_only_layout_single_pe() {
    let text = r#"
param T int 1
param S int 1
param I
param J
var i j
func A
func driver
A(-1, -1) = 0
A(i, -1) = 0
A(-1, j) = 0
A(i, j) = f(A(i - 1, j), A(i, j - 1), A(i - 1, j - 1), T(i - 1), S(j - 1))
bounds A i 0 I
bounds A j 0 J
store A I-1 J-1
A.isolate_producer_chain(S, driver).isolate_producer_chain(T, driver).isolate_producer_chain(A, driver).isolate_consumer_chain(A, driver)
"#;
    let (p, s) = systolic::parse::parse_spec(text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut b = Binding::new();
    b.set_scalar("I", 5).set_scalar("J", 4);
    b.set_tensor("T", systolic::examples::random_symbol_seq(5, &mut rng));
    b.set_tensor("S", systolic::examples::random_symbol_seq(4, &mut rng));
    let report = differential_check(&p, &s, &b, &registry(), &CheckOptions::default());
    assert!(report.pass, "{}", report.render());
    let sp = ScheduledProgram::build(&p, &s).unwrap();
    let graph = instantiate_pes(&sp, &b, &registry()).unwrap();
    assert_eq!(graph.pes_of("A").len(), 1, "no unrolling: one compute PE");
}

/// One producer function feeding two distinct consumers splits its emissions
/// into separate channels.
#[test]
fn one_producer_two_consumers() {
    let text = r#"
param x int 1
param I
var i
func F
func G
func H
F(i) = x(i) * 2
G(i) = F(i) + 1
H(i) = F(i) - 1
bounds F i 0 I
bounds G i 0 I
bounds H i 0 I
"#;
    let (p, s) = systolic::parse::parse_spec(text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut b = Binding::new();
    b.set_scalar("I", 5);
    b.set_tensor("x", systolic::examples::random_int_tensor(&[5], &mut rng));
    let report = differential_check(&p, &s, &b, &registry(), &CheckOptions::default());
    assert!(report.pass, "{}", report.render());
}

/// The alignment example's per-tile register buffer stages the boundary
/// values arriving from the driver.
#[test]
fn alignment_register_buffer_stages_feedback() {
    let (p, s) = systolic::examples::load("smith-waterman").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let b = systolic::examples::default_binding("smith-waterman", &mut rng).unwrap();
    let (_, trace, graph) =
        systolic::verify::build_and_run(&p, &s, &b, &registry(), &CheckOptions::default())
            .unwrap();
    let mut buffered_pes = 0;
    let mut total_fills = 0;
    for &pe in &graph.pes_of("A") {
        for bs in &trace.buffers[pe] {
            if bs.value == "A" {
                buffered_pes += 1;
                total_fills += bs.fills;
            }
        }
    }
    assert!(buffered_pes > 0, "boundary PEs stage A values in a buffer");
    assert!(total_fills > 0);
}
