use super::*;
use crate::exec::{probe_input, BackendId, Executor};
use crate::graph::{infer_shapes, input_specs, parse_model_dsl, LossKind, OptimizerKind};
use crate::seeds;

fn model(text: &str) -> Model {
    let mut m = parse_model_dsl(text).unwrap();
    m.lineage = crate::graph::Lineage::root("t", m.metadata.depth);
    m
}

fn r(seed: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, "test")
}

fn kernel_table(values: &[i64]) -> MutationTable {
    let vs: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    MutationTable::from_toml(&format!(
        "version = 1\n[tasks]\n[[layer]]\nkind = \"Conv2d\"\nparam = \"kernel_size\"\nvalues = [{}]\n",
        vs.join(",")
    ))
    .unwrap()
}

#[test]
fn registry_has_seven_unique_operators() {
    let reg = registry();
    let ids: std::collections::BTreeSet<_> = reg.iter().map(|o| o.op_id).collect();
    assert_eq!(ids.len(), 7);
    let ident = model("input f32[2,3]\nlayer i Identity\n");
    assert!(!(reg[0].applicability)(&ident));
}

#[test]
fn rejection_strings_round_trip() {
    for r in [
        Rejection::NoApplicableSite,
        Rejection::ShapeInfeasible,
        Rejection::StructuralCrash,
        Rejection::ConstraintViolation(Constraint::MC3),
    ] {
        assert_eq!(r.to_string().parse::<Rejection>().unwrap(), r);
    }
    assert_eq!(Rejection::ConstraintViolation(Constraint::MC4).to_string(), "constraint-violation(MC4)");
}

#[test]
fn max_pool_becomes_avg_pool() {
    let m = model("input f32[2,3,8,8]\nlayer p MaxPool kernel_size=2\n");
    let out = mo1_replace_structure(&m, &mut r(1));
    let mutant = out.mutant.expect("pool has a same-class candidate");
    assert_eq!(mutant.count_kind(LayerKind::AvgPool), 1);
    assert_eq!(mutant.count_kind(LayerKind::MaxPool), 0);
}

#[test]
fn identity_only_model_has_no_site() {
    let m = model("input f32[2,3]\nlayer a Identity\nlayer b Identity\n");
    for op in [OpId::MO1, OpId::MO2, OpId::MO4, OpId::MO5] {
        let out = apply(op, &m, 3);
        assert_eq!(out.rejection, Some(Rejection::NoApplicableSite), "{op}");
    }
    // Depth 2 leaves no series budget at all.
    assert_eq!(apply(OpId::MO3, &m, 3).rejection, Some(Rejection::ConstraintViolation(Constraint::MC3)));
}

#[test]
fn conv_bn_relu_can_become_residual_block() {
    let m = model(
        "input f32[2,4,8,8]\nlayer c Conv2d out_channels=4 kernel_size=3 padding=1\nlayer b BatchNorm\nlayer r ReLU\n",
    );
    let mut seen = false;
    for s in 0..200 {
        let out = mo1_replace_structure(&m, &mut r(s));
        let mutant = out.mutant.unwrap();
        assert!(infer_shapes(&mutant).is_ok());
        seen |= out.site.ends_with("residual_block");
    }
    assert!(seen);
}

#[test]
fn dense_resize_stays_in_quarter_to_four_times() {
    let m = model("input f32[4,8]\nlayer d Dense units=64\nlayer r ReLU\nlayer o Dense units=3\n");
    for s in 0..1000 {
        let out = mo2_change_shape_dim(&m, &mut r(s));
        let mutant = out.mutant.unwrap();
        let u = mutant.nodes["d"].int("units");
        assert!((16..=256).contains(&u), "units {u}");
        assert!(audit(&mutant).is_empty());
    }
}

#[test]
fn unit_extent_never_drops_below_one() {
    let m = model("input f32[4,8]\nlayer d Dense units=1\nlayer r ReLU\nlayer o Dense units=3\n");
    for s in 0..200 {
        if let Some(mutant) = mo2_change_shape_dim(&m, &mut r(s)).mutant {
            assert!(mutant.nodes.values().filter(|n| n.kind == LayerKind::Dense).all(|n| n.int("units") >= 1));
        }
    }
}

#[test]
fn conv_growth_propagates_to_successor() {
    let m = model(
        "input f32[2,3,8,8]\nlayer c1 Conv2d out_channels=8 kernel_size=3 padding=1\nlayer r ReLU\nlayer c2 Conv2d out_channels=8 kernel_size=3 padding=1\nlayer f Flatten\nlayer d Dense units=3\n",
    );
    for s in 0..100 {
        let mutant = mo2_change_shape_dim(&m, &mut r(s)).mutant.unwrap();
        if mutant.nodes.get("c1").map(|n| n.int("out_channels")) == Some(32) {
            let shapes = infer_shapes(&mutant).unwrap();
            let ins = input_specs(&mutant, &shapes);
            assert_eq!(ins["c2"][0].channels(), 32);
            assert!(validate_graph(&mutant).is_empty());
            return;
        }
    }
    panic!("no draw grew c1 to 32");
}

#[test]
fn head_resize_gets_an_adapter() {
    let m = model("input f32[4,8]\nlayer o Dense units=3\n");
    let out = mo2_change_shape_dim(&m, &mut r(0));
    let mutant = out.mutant.unwrap();
    assert!(out.site.ends_with("+adapter"));
    assert_eq!(surgery::sink_spec(&mutant), surgery::sink_spec(&m));
    assert_eq!(mutant.nodes.len(), 2);
}

#[test]
fn conv_head_resize_gets_a_conv_adapter() {
    let m = model("input f32[2,3,6,6]\nlayer c Conv2d out_channels=4 kernel_size=3\n");
    let mut adapted = 0;
    for s in 0..20 {
        let out = mo2_change_shape_dim(&m, &mut r(s));
        let mutant = out.mutant.expect("conv sink can always be adapted");
        if out.site.ends_with("+adapter") {
            adapted += 1;
            assert_eq!(mutant.count_kind(crate::graph::LayerKind::Conv2d), 2);
            assert_eq!(surgery::sink_spec(&mutant), surgery::sink_spec(&m));
        }
    }
    assert!(adapted > 0);
}

fn depth_ten() -> Model {
    let mut text = String::from("input f32[2,8]\n");
    for i in 0..4 {
        text.push_str(&format!("layer d{i} Dense units=8\nlayer s{i} Sigmoid\n"));
    }
    text.push_str("layer d4 Dense units=8\nlayer o Dense units=3\n");
    model(&text)
}

#[test]
fn series_budget_allows_two_inserts_on_depth_ten() {
    let m = depth_ten();
    assert_eq!(m.metadata.depth, 10);
    assert_eq!(m.lineage.series_budget(), 2);
    let a = series_insert(&m, Some("d0"), "relu").unwrap();
    let b = series_insert(&a, Some("d1"), "relu").unwrap();
    assert_eq!(b.lineage.series_edits, 2);
    assert_eq!(
        series_insert(&b, Some("d2"), "relu"),
        Err(Rejection::ConstraintViolation(Constraint::MC3))
    );
    let out = mo3_series_add_delete(&b, &mut r(1));
    assert_eq!(out.rejection, Some(Rejection::ConstraintViolation(Constraint::MC3)));
    assert!(audit(&b).is_empty());
}

#[test]
fn conv_between_convs_is_rejected() {
    let m = model(
        "input f32[2,4,8,8]\nlayer c1 Conv2d out_channels=4 kernel_size=3 padding=1\nlayer c2 Conv2d out_channels=4 kernel_size=3 padding=1\nlayer c3 Conv2d out_channels=4 kernel_size=3 padding=1\nlayer c4 Conv2d out_channels=4 kernel_size=3 padding=1\nlayer c5 Conv2d out_channels=4 kernel_size=3 padding=1\n",
    );
    assert_eq!(m.lineage.series_budget(), 1);
    assert_eq!(
        series_insert(&m, Some("c1"), "same_conv"),
        Err(Rejection::ConstraintViolation(Constraint::MC3))
    );
    assert!(series_insert(&m, Some("c1"), "relu").is_ok());
}

#[test]
fn vgg_deletion_removes_one_full_stage() {
    let m = seeds::builtin("vgg_small").unwrap();
    let mut deleted = 0;
    for s in 0..20 {
        let out = mo3_series_delete(&m, &mut r(s));
        let Some(mutant) = out.mutant else { continue };
        assert_eq!(mutant.metadata.depth, 12);
        assert_eq!(mutant.nodes.len(), m.nodes.len() - 3);
        assert!(validate_graph(&mutant).is_empty());
        assert_eq!(mutant.lineage.series_edits, 3);
        deleted += 1;
    }
    assert!(deleted > 0);
}

#[test]
fn deletion_needs_a_repeated_structure() {
    let m = seeds::builtin("lenet_small").unwrap();
    assert_eq!(mo3_series_delete(&m, &mut r(0)).rejection, Some(Rejection::NoApplicableSite));
}

#[test]
fn third_branch_add_is_rejected() {
    let mut m = seeds::builtin("resnet_mini").unwrap();
    m.lineage.branch_adds.insert("a".into(), 2);
    let out = mo4_parallel_add(&m, &mut r(0));
    assert_eq!(out.rejection, Some(Rejection::ConstraintViolation(Constraint::MC4)));
}

#[test]
fn parallel_branch_keeps_output_spec() {
    let m = seeds::builtin("resnet_mini").unwrap();
    let mut cur = m.clone();
    for s in 0..2 {
        let out = mo4_parallel_add(&cur, &mut r(s));
        cur = out.mutant.expect("branch fits the residual site");
        assert_eq!(cur.preds("a").len(), 3 + s as usize);
        assert_eq!(surgery::sink_spec(&cur), surgery::sink_spec(&m));
        assert!(audit(&cur).is_empty());
    }
    assert_eq!(cur.lineage.branch_adds["a"], 2);
    let out = mo4_parallel_add(&cur, &mut r(9));
    assert_eq!(out.rejection, Some(Rejection::ConstraintViolation(Constraint::MC4)));
}

#[test]
fn last_branch_is_protected() {
    let m = seeds::builtin("resnet_mini").unwrap();
    let one = mo4_parallel_delete(&m, &mut r(0)).mutant.unwrap();
    assert_eq!(one.preds("a").len(), 1);
    assert!(validate_graph(&one).is_empty());
    assert_eq!(mo4_parallel_delete(&one, &mut r(1)).rejection, Some(Rejection::NoApplicableSite));
}

#[test]
fn kernel_three_moves_to_five_or_seven() {
    let m = model("input f32[2,1,16,16]\nlayer c Conv2d out_channels=2 kernel_size=3\nlayer d Dense units=3\n");
    let table = kernel_table(&[3, 5, 7]);
    for s in 0..50 {
        let mutant = mo5_change_param_with(&m, &table, &mut r(s)).mutant.unwrap();
        assert!([5, 7].contains(&mutant.nodes["c"].int("kernel_size")));
    }
}

#[test]
fn singleton_value_set_cannot_change() {
    let m = model("input f32[2,1,16,16]\nlayer c Conv2d out_channels=2 kernel_size=3\nlayer d Dense units=3\n");
    let out = mo5_change_param_with(&m, &kernel_table(&[3]), &mut r(0));
    assert_eq!(out.rejection, Some(Rejection::NoApplicableSite));
}

#[test]
fn kernel_seven_fits_eight_but_not_four() {
    let table = kernel_table(&[7]);
    let m8 = model("input f32[2,1,8,8]\nlayer c Conv2d out_channels=2 kernel_size=3\nlayer d Dense units=3\n");
    let mutant = mo5_change_param_with(&m8, &table, &mut r(0)).mutant.unwrap();
    assert_eq!(infer_shapes(&mutant).unwrap()["c"].shape[2..], [2, 2]);
    let m4 = model("input f32[2,1,4,4]\nlayer c Conv2d out_channels=2 kernel_size=3\nlayer d Dense units=3\n");
    let out = mo5_change_param_with(&m4, &table, &mut r(0));
    assert_eq!(out.rejection, Some(Rejection::ShapeInfeasible));
}

#[test]
fn bundled_table_draws_stay_in_table() {
    for seed in seeds::all_builtin() {
        for s in 0..40 {
            if let Some(m) = mo5_change_param(&seed, &mut r(s)).mutant {
                assert!(audit(&m).is_empty(), "{:?}", audit(&m));
            }
        }
    }
}

#[test]
fn classification_loss_stays_in_task() {
    let m = seeds::builtin("lenet_small").unwrap();
    for s in 0..200 {
        let mutant = mo6_change_loss(&m, &mut r(s)).mutant.unwrap();
        assert!(matches!(mutant.loss.kind, LossKind::CrossEntropy | LossKind::BinaryCrossEntropy));
        assert!(mutant.same_structure(&mutant));
        assert_eq!(mutant.nodes, m.nodes);
    }
    let reg = seeds::builtin("mlp_regression").unwrap();
    for s in 0..50 {
        let mutant = mo6_change_loss(&reg, &mut r(s)).mutant.unwrap();
        assert!(matches!(mutant.loss.kind, LossKind::MeanSquaredError | LossKind::SmoothL1));
    }
}

#[test]
fn learning_rate_redraw_in_unit_interval() {
    let m = seeds::builtin("lenet_small").unwrap();
    let old = m.optimizer.learning_rate();
    let mut redraws = 0;
    for s in 0..200 {
        let mutant = mo7_change_optimizer(&m, &mut r(s)).mutant.unwrap();
        let lr = mutant.optimizer.learning_rate();
        assert!(lr > 0.0 && lr <= 1.0);
        if mutant.optimizer.kind == m.optimizer.kind {
            assert_ne!(lr, old);
            redraws += 1;
        }
    }
    assert!(redraws > 0);
}

#[test]
fn optimizer_swap_leaves_step_zero_forward_identical() {
    let m = seeds::builtin("lenet_small").unwrap();
    let mut swapped = None;
    for s in 0..50 {
        let mutant = mo7_change_optimizer(&m, &mut r(s)).mutant.unwrap();
        if mutant.optimizer.kind == OptimizerKind::Adam {
            swapped = Some(mutant);
            break;
        }
    }
    let mutant = swapped.expect("an Adam swap within 50 draws");
    let x = probe_input(&m.input_spec, 4);
    let e = Executor::new(BackendId::A);
    let a = e.forward(&m, &x, 2);
    let b = e.forward(&mutant, &x, 2);
    assert_eq!(a.final_output(), b.final_output());
}

#[test]
fn apply_bookkeeping_and_replay() {
    let m = seeds::builtin("vgg_small").unwrap();
    for op in OpId::ALL {
        let snapshot = m.clone();
        let a = apply(op, &m, 17);
        let b = apply(op, &m, 17);
        assert_eq!(m, snapshot);
        assert_eq!(a, b);
        if let Some(mutant) = &a.mutant {
            assert_eq!(mutant.lineage.select_num, m.lineage.select_num + 1);
            assert_eq!(mutant.lineage.snums[op.index()], 1);
            assert_eq!(mutant.lineage.last_op(), Some(op));
            assert_eq!(
                crate::graph::serialize_model(mutant),
                crate::graph::serialize_model(b.mutant.as_ref().unwrap())
            );
        }
    }
}

#[test]
fn mutation_chains_stay_valid_and_sound() {
    for seed in seeds::all_builtin() {
        let mut cur = seed.clone();
        for i in 0..60u64 {
            let op = OpId::ALL[(i * 5 + 3) as usize % 7];
            let out = apply(op, &cur, i);
            assert_eq!(out.is_mutated(), out.mutant.is_some());
            if let Some(m) = out.mutant {
                assert!(validate_graph(&m).is_empty());
                assert!(audit(&m).is_empty(), "{:?}", audit(&m));
                cur = m;
            }
        }
    }
}
