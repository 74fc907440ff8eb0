use std::collections::HashSet;

use super::*;

/// Stack-machine interpreter for parenthesized arithmetic.
fn arith_oracle(tokens: &[&str]) -> u32 {
    let mut stack: Vec<&str> = Vec::new();
    let mut values: Vec<u32> = Vec::new();
    for &t in tokens {
        match t {
            "(" | "+" | "*" => stack.push(t),
            ")" => {
                let op = stack.pop().unwrap();
                assert_eq!(stack.pop(), Some("("));
                let b = values.pop().unwrap();
                let a = values.pop().unwrap();
                values.push(if op == "+" { (a + b) % 10 } else { (a * b) % 10 });
            }
            d => values.push(d.parse().unwrap()),
        }
    }
    assert_eq!(values.len(), 1);
    values[0]
}

/// Stack interpreter for ListOps returning `(value, dependency depth)`.
fn listops_oracle(tokens: &[&str]) -> (u32, u32) {
    enum Item {
        Open(String),
        Val(u32, u32),
    }
    let mut stack: Vec<Item> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i] {
            "[" => {
                stack.push(Item::Open(tokens[i + 1].to_string()));
                i += 1;
            }
            "]" => {
                let mut args = Vec::new();
                let op = loop {
                    match stack.pop().unwrap() {
                        Item::Val(v, d) => args.push((v, d)),
                        Item::Open(op) => break op,
                    }
                };
                args.reverse();
                let mut sorted: Vec<u32> = args.iter().map(|a| a.0).collect();
                sorted.sort();
                let n = sorted.len();
                // Values the operation depends on (with multiplicity).
                let (value, needed): (u32, Vec<u32>) = match op.as_str() {
                    "SM" => (sorted.iter().sum::<u32>() % 10, sorted.clone()),
                    "MIN" => (sorted[0], vec![sorted[0]]),
                    "MAX" => (sorted[n - 1], vec![sorted[n - 1]]),
                    "MED" if n % 2 == 1 => (sorted[n / 2], vec![sorted[n / 2]]),
                    "MED" => ((sorted[n / 2 - 1] + sorted[n / 2]) / 2, vec![sorted[n / 2 - 1], sorted[n / 2]]),
                    other => panic!("bad op {other}"),
                };
                // Cheapest arguments realising each needed value.
                let mut used = vec![false; args.len()];
                let mut dep = 0;
                for v in needed {
                    let (j, _) = args
                        .iter()
                        .enumerate()
                        .filter(|(j, a)| a.0 == v && !used[*j])
                        .min_by_key(|(_, a)| a.1)
                        .unwrap();
                    used[j] = true;
                    dep = dep.max(args[j].1);
                }
                stack.push(Item::Val(value, dep + 1));
            }
            d => stack.push(Item::Val(d.parse().unwrap(), 0)),
        }
        i += 1;
    }
    match stack.pop() {
        Some(Item::Val(v, d)) if stack.is_empty() => (v, d),
        _ => panic!("unbalanced"),
    }
}

/// Table composition read from the raw tables.
fn ctl_oracle(tokens: &[&str], backward: bool, tables: &[Vec<u8>]) -> u32 {
    let mut t: Vec<&str> = tokens.to_vec();
    if backward {
        t.reverse();
    }
    let mut s = u32::from_str_radix(t[0], 2).unwrap();
    for f in &t[1..] {
        let idx = (f.as_bytes()[0] - b'a') as usize;
        s = tables[idx][s as usize] as u32;
    }
    s
}

fn check_oracle(ds: &Dataset) {
    for name in SplitName::ALL {
        for s in ds.split(name) {
            let toks = ds.token_strings(s);
            let class = &ds.vocab.classes[s.target as usize];
            let target = if ds.task.is_ctl() { u32::from_str_radix(class, 2) } else { class.parse() }.unwrap();
            match ds.task {
                Task::Ctl | Task::CtlBackward => {
                    assert_eq!(ctl_oracle(&toks, ds.task == Task::CtlBackward, &ds.ctl.as_ref().unwrap().tables), target);
                }
                Task::Arith => assert_eq!(arith_oracle(&toks), target),
                Task::Listops => {
                    let (v, dep) = listops_oracle(&toks);
                    assert_eq!(v, target);
                    assert_eq!(Some(dep), s.dep_depth);
                }
            }
            assert_eq!(ds.task.evaluate(&toks, ds.ctl.as_ref()).unwrap(), s.target as usize);
        }
    }
}

fn small(task: Task) -> SplitPlan {
    let mut p = task.default_plan().scaled_down(100);
    p.train.size = p.train.size.min(3000);
    p
}

#[test]
fn oracles_agree_with_literal_examples() {
    assert_eq!(arith_oracle(&["(", "(", "4", "*", "7", ")", "+", "2", ")"]), 0);
    let t: Vec<&str> = "[ MED 4 8 5 [ MAX 8 4 9 ] ]".split(' ').collect();
    // The MAX branch yields 9, outside the two middle values.
    assert_eq!(listops_oracle(&t), (6, 1));
    let t: Vec<&str> = "[ MAX 9 [ SM 2 3 ] ]".split(' ').collect();
    assert_eq!(listops_oracle(&t), (9, 1));
}

#[test]
fn generated_targets_match_independent_interpreters() {
    for task in Task::ALL {
        let ds = generate(task, 7, &small(task)).unwrap();
        check_oracle(&ds);
    }
}

#[test]
fn splits_follow_plan_depths_and_sizes() {
    for task in Task::ALL {
        let plan = small(task);
        let ds = generate(task, 3, &plan).unwrap();
        for name in SplitName::ALL {
            let spec = plan.get(name);
            let split = ds.split(name);
            assert_eq!(split.len(), spec.size, "{task} {name}");
            for (depth, quota) in spec.quotas() {
                let key = |s: &Sample| s.dep_depth.unwrap_or(s.depth);
                assert_eq!(split.iter().filter(|s| key(s) == depth).count(), quota);
            }
            for s in split {
                assert!(spec.depths.contains(&s.depth), "{task} {name} depth {}", s.depth);
                assert!(s.tokens.len() <= task.max_tokens());
            }
        }
        let max_train = ds.split(SplitName::Train).iter().map(|s| s.depth).max().unwrap();
        let ood = ds.split(SplitName::ValidOod).iter().map(|s| s.depth);
        let (lo, hi) = (ood.clone().min().unwrap(), ood.max().unwrap());
        let min_test = ds.split(SplitName::Test).iter().map(|s| s.depth).min().unwrap();
        assert!(max_train < lo && hi < min_test);
    }
}

#[test]
fn ctl_full_train_size_and_unit_coverage() {
    let plan = Task::Ctl.default_plan();
    let ds = generate(Task::Ctl, 1, &plan).unwrap();
    let train = ds.split(SplitName::Train);
    assert_eq!(train.len(), 53_704);
    let pairs: HashSet<&[u8]> = train.iter().filter(|s| s.depth == 1).map(|s| s.tokens.as_slice()).collect();
    assert_eq!(pairs.len(), 72);
    let test_depths: HashSet<u32> = ds.split(SplitName::Test).iter().map(|s| s.depth).collect();
    assert_eq!(test_depths, HashSet::from([9, 10]));
}

#[test]
fn backward_ctl_is_token_reversal_of_forward() {
    let plan = small(Task::Ctl);
    let f = generate(Task::Ctl, 11, &plan).unwrap();
    let b = generate(Task::CtlBackward, 11, &plan).unwrap();
    assert_eq!(f.ctl, b.ctl);
    for name in SplitName::ALL {
        for (x, y) in f.split(name).iter().zip(b.split(name)) {
            let mut r = x.tokens.clone();
            r.reverse();
            assert_eq!(r, y.tokens);
            assert_eq!(x.target, y.target);
        }
    }
}

#[test]
fn generation_is_independent_of_parallelism() {
    let plan = small(Task::Listops);
    let a = generate(Task::Listops, 5, &plan).unwrap();
    par::set_enabled(false);
    let b = generate(Task::Listops, 5, &plan);
    par::set_enabled(true);
    let b = b.unwrap();
    for name in SplitName::ALL {
        assert_eq!(a.split(name), b.split(name));
    }
    let c = generate(Task::Listops, 6, &plan).unwrap();
    assert_ne!(a.split(SplitName::Train), c.split(SplitName::Train));
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small(Task::Arith);
    let ds = generate(Task::Arith, 2, &plan).unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    for name in SplitName::ALL {
        assert_eq!(ds.split(name), back.split(name));
    }
    let line = std::fs::read_to_string(dir.path().join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(first["tokens"].is_array() && first["target"].is_string() && first["dep_depth"].is_null());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 2);
    assert_eq!(m["task"], "arith");
}

#[test]
fn vocab_layout_and_description_round_trip() {
    for task in Task::ALL {
        let v = task.vocab();
        assert_eq!(v.id(PAD).unwrap(), PAD_ID);
        assert_eq!(v.id(BEGIN).unwrap(), BEGIN_ID);
        assert_eq!(v.id(END).unwrap(), END_ID);
        let back = Vocab::from_description(&v.describe()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id(v.token(5)).unwrap(), 5);
    }
    assert_eq!(Task::Ctl.vocab().len(), 3 + 17);
    assert_eq!(Task::Ctl.vocab().n_classes(), 8);
    assert_eq!(Task::Listops.vocab().n_classes(), 10);
    assert!(Task::Arith.vocab().id("[").is_err());
}

#[test]
fn quotas_are_balanced() {
    let s = SplitSpec::new(1..=5, 53_704);
    assert_eq!(s.quotas(), vec![(1, 10741), (2, 10741), (3, 10741), (4, 10741), (5, 10740)]);
}

#[test]
fn overlapping_plans_are_rejected() {
    let mut p = Task::Arith.default_plan();
    p.valid_ood.depths = vec![5];
    assert!(generate(Task::Arith, 0, &p).is_err());
}
