use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn example1() -> GridMap {
    GridMap::from_codes(&[&[1, 0, 0], &[0, -1, 0], &[0, 0, 2]]).unwrap()
}

fn example2() -> GridMap {
    GridMap::from_codes(&[&[1, 0, -1], &[0, -1, 0], &[0, 0, 2]]).unwrap()
}

/// Independent interpreter over raw cell codes.
fn brute_force(codes: &[Vec<i8>], actions: &[Action]) -> (&'static str, Vec<(usize, usize)>) {
    let n = codes.len() as i32;
    let mut r = 0i32;
    let mut c = 0i32;
    for (i, row) in codes.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v == 1 {
                r = i as i32;
                c = j as i32;
            }
        }
    }
    let mut trace = vec![(r as usize, c as usize)];
    for a in actions {
        let (nr, nc) = match a {
            Action::Up => (r - 1, c),
            Action::Down => (r + 1, c),
            Action::Left => (r, c - 1),
            Action::Right => (r, c + 1),
        };
        if nr >= 0 && nr < n && nc >= 0 && nc < n {
            r = nr;
            c = nc;
        }
        trace.push((r as usize, c as usize));
        match codes[r as usize][c as usize] {
            -1 => return ("B", trace),
            2 => return ("A", trace),
            _ => {}
        }
    }
    ("C", trace)
}

fn codes_of(map: &GridMap) -> Vec<Vec<i8>> {
    (0..map.size)
        .map(|r| {
            (0..map.size)
                .map(|c| match map.tile((r, c)) {
                    Tile::Start => 1,
                    Tile::Ice => 0,
                    Tile::Hole => -1,
                    Tile::Goal => 2,
                })
                .collect()
        })
        .collect()
}

/// Shortest path length by repeated relaxation until a fixed point.
fn relaxation_distance(codes: &[Vec<i8>]) -> Option<usize> {
    let n = codes.len();
    let inf = usize::MAX;
    let mut d = vec![vec![inf; n]; n];
    let mut goal = (0, 0);
    for r in 0..n {
        for c in 0..n {
            if codes[r][c] == 1 {
                d[r][c] = 0;
            }
            if codes[r][c] == 2 {
                goal = (r, c);
            }
        }
    }
    loop {
        let mut changed = false;
        for r in 0..n {
            for c in 0..n {
                if codes[r][c] == -1 || codes[r][c] == 2 {
                    continue;
                }
                if d[r][c] == inf {
                    continue;
                }
                let nbs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                for (nr, nc) in nbs {
                    if nr < n && nc < n && codes[nr][nc] != -1 && d[r][c] + 1 < d[nr][nc] {
                        d[nr][nc] = d[r][c] + 1;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let g = d[goal.0][goal.1];
    (g != inf).then_some(g)
}

#[test]
fn maps_respect_hole_cap_and_reachability() {
    for seed in 0..1000 {
        let m = generate_map(6, seed).unwrap();
        assert!(m.holes() <= 7);
        assert!(m.solvable());
        assert_ne!(m.start(), m.goal());
    }
    for size in 3..=5 {
        for seed in 0..200 {
            let m = generate_map(size, seed).unwrap();
            assert!(m.holes() <= size * size / 5);
            assert!(relaxation_distance(&codes_of(&m)).is_some());
        }
    }
    assert_eq!(generate_map(5, 9).unwrap(), generate_map(5, 9).unwrap());
    assert!(generate_map(7, 0).is_err());
    assert!(generate_map(2, 0).is_err());
}

#[test]
fn simulate_examples() {
    let (o, tr) = simulate(&example1(), &[Action::Right]);
    assert_eq!(tr, vec![(0, 0), (0, 1)]);
    assert_eq!(example1().tile((0, 1)), Tile::Ice);
    assert_eq!(o, Outcome::SafeNoGoal);

    let (o, tr) = simulate(&example2(), &[Action::Down, Action::Right]);
    assert_eq!(o, Outcome::FallHole);
    assert_eq!(tr.last(), Some(&(1, 1)));

    let (o, tr) = simulate(&example1(), &[]);
    assert_eq!((o, tr), (Outcome::SafeNoGoal, vec![(0, 0)]));

    let (o, tr) = simulate(&example1(), &[Action::Up, Action::Left]);
    assert_eq!(tr, vec![(0, 0); 3]);
    assert_eq!(o, Outcome::SafeNoGoal);
}

#[test]
fn simulate_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let size = rng.random_range(3..=6);
        let map = generate_map(size, rng.random()).unwrap();
        let len = rng.random_range(0..12);
        let actions: Vec<Action> = (0..len).map(|_| Action::ALL[rng.random_range(0..4)]).collect();
        let (o, tr) = simulate(&map, &actions);
        let (letter, tr2) = brute_force(&codes_of(&map), &actions);
        assert_eq!(o.letter(), letter);
        assert_eq!(tr, tr2);
    }
}

#[test]
fn planner_examples() {
    let plan = plan_shortest(&example1()).unwrap();
    assert_eq!(plan, vec![Action::Down, Action::Down, Action::Right, Action::Right]);
    let adjacent = GridMap::from_codes(&[&[1, 2, 0], &[0, 0, 0], &[0, 0, 0]]).unwrap();
    assert_eq!(plan_shortest(&adjacent).unwrap(), vec![Action::Right]);
}

#[test]
fn planner_matches_relaxation_oracle() {
    for seed in 0..1000 {
        let map = generate_map(3 + (seed as usize % 4), seed).unwrap();
        let plan = plan_shortest(&map).unwrap();
        assert_eq!(Some(plan.len()), relaxation_distance(&codes_of(&map)));
        let (o, tr) = simulate(&map, &plan);
        assert_eq!(o, Outcome::Success);
        assert_eq!(tr.len(), plan.len() + 1);
    }
}

fn count_channel(img: &HelperImage, range: std::ops::Range<usize>) -> usize {
    (0..img.rows).flat_map(|r| (0..img.cols).map(move |c| (r, c))).filter(|&(r, c)| img.cell(r, c)[range.clone()].contains(&1.0)).count()
}

#[test]
fn helper_rendering() {
    let map = example1();
    let plan = plan_shortest(&map).unwrap();
    let img = render_helper(&map, HelperMode::Plan { path: &plan }).unwrap();
    assert_eq!(count_channel(&img, CH_ARROW..CH_ARROW + 4), 4);

    let acts = [Action::Right, Action::Right, Action::Down];
    let img = render_helper(&map, HelperMode::Reason { actions: &acts, prefix_len: 0 }).unwrap();
    assert_eq!(img.cell(0, 0)[CH_AGENT], 1.0);
    assert_eq!(count_channel(&img, CH_AGENT..CH_AGENT + 1), 1);
    assert_eq!(count_channel(&img, CH_VISITED..CH_VISITED + 1), 0);

    let img = render_helper(&map, HelperMode::Reason { actions: &acts, prefix_len: 2 }).unwrap();
    assert_eq!(img.cell(0, 2)[CH_AGENT], 1.0);
    assert_eq!(img.cell(0, 0)[CH_VISITED], 1.0);
    assert_eq!(img.cell(0, 1)[CH_VISITED], 1.0);

    assert!(render_helper(&map, HelperMode::Reason { actions: &acts, prefix_len: 4 }).is_err());
    assert!(render_helper(&map, HelperMode::Plan { path: &[Action::Right] }).is_err());
    assert_eq!(map_from_image(&render_map(&map)).unwrap(), map);
}

#[test]
fn helper_channels_stay_exclusive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let size = rng.random_range(3..=6);
        let map = generate_map(size, rng.random()).unwrap();
        let img = if i % 2 == 0 {
            let path = plan_shortest(&map).unwrap();
            render_helper(&map, HelperMode::Plan { path: &path }).unwrap()
        } else {
            let acts: Vec<Action> = (0..rng.random_range(1..8)).map(|_| Action::ALL[rng.random_range(0..4)]).collect();
            let executed = simulate(&map, &acts).1.len() - 1;
            let prefix_len = rng.random_range(0..=executed);
            render_helper(&map, HelperMode::Reason { actions: &acts, prefix_len }).unwrap()
        };
        assert!(img.data.iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(count_channel(&img, CH_AGENT..CH_AGENT + 1) <= 1);
        for r in 0..size {
            for c in 0..size {
                let cell = img.cell(r, c);
                assert!(cell[CH_ARROW..CH_ARROW + 4].iter().sum::<f64>() <= 1.0);
                assert_eq!(cell[..4].iter().sum::<f64>(), 1.0);
            }
        }
    }
}

#[test]
fn thought_templates() {
    let map = example1();
    let acts = [Action::Right];
    let inst = TaskInstance::Reason { map: &map, actions: &acts, prefix_len: 0 };
    let (pre, post) = synthesize_thoughts(&inst, "C", Variant::Cot, 0);
    assert_eq!(pre, "<think>");
    assert!(post.contains("( 0 , 1 )"), "{post}");
    assert!(post.ends_with("\\boxed{ C } ."), "{post}");

    let (pre, post) = synthesize_thoughts(&inst, "C", Variant::Direct, 0);
    assert_eq!(pre, "");
    assert_eq!(post, "the answer is \\boxed{ C } .");

    let a = synthesize_thoughts(&inst, "C", Variant::Cot, 10);
    let b = synthesize_thoughts(&inst, "C", Variant::Cot, 11);
    assert_ne!(a, b);
    assert_eq!(a.1.split("</think>").nth(1), b.1.split("</think>").nth(1));

    let tk = crate::model::Tokenizer::standard();
    for seed in 0..30 {
        for task in [TaskKind::Reason, TaskKind::Plan, TaskKind::Jigsaw] {
            let s = generate_sample(task, 3 + seed as usize % 4, seed, Variant::Cot, Some(seed)).unwrap();
            for text in [&s.question_text, &s.o_pre, &s.o_post] {
                tk.encode(text).unwrap_or_else(|e| panic!("{e} in {text}"));
            }
        }
    }
}

#[test]
fn jigsaw_construction() {
    let mut a_count = 0;
    for seed in 0..1000 {
        let j = jigsaw_parts(seed);
        let truth = &j.candidates[j.true_slot];
        let wrong = &j.candidates[1 - j.true_slot];
        let diff = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).filter(|&(r, c)| truth.cell(r, c) != wrong.cell(r, c)).count();
        assert_eq!(diff, JIGSAW_FLIPS);
        if j.inserted_slot == j.true_slot {
            assert_eq!(j.helper, j.original);
        } else {
            assert_ne!(j.helper, j.original);
        }
        if j.true_slot == 0 {
            a_count += 1;
        }
    }
    assert!((450..=550).contains(&a_count), "{a_count}");
    let s = generate_jigsaw(4, Variant::Cot).unwrap();
    assert_eq!(s.input_images.len(), 3);
    assert_eq!(s.answer, ["A", "B"][jigsaw_parts(4).true_slot]);
}

#[test]
fn dataset_sizes_and_ratios() {
    let ds = build_dataset(TaskKind::Reason, 1000, Split::Rl, 42, Variant::Cot).unwrap();
    let mut per_level: HashMap<usize, usize> = HashMap::new();
    for s in &ds.samples {
        *per_level.entry(s.level).or_default() += 1;
        assert!(!s.has_thoughts());
    }
    assert_eq!(per_level[&3], 100);
    assert_eq!(per_level[&4], 200);
    assert_eq!(per_level[&5], 300);
    assert_eq!(per_level[&6], 400);
    assert!(build_dataset(TaskKind::Reason, 15, Split::Rl, 42, Variant::Cot).is_err());
}

#[test]
fn sft_dataset_lines_and_balance() {
    let ds = build_dataset(TaskKind::Reason, 1000, Split::Sft, 42, Variant::Cot).unwrap();
    assert_eq!(ds.samples.len(), 3000);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in &ds.samples {
        *counts.entry(s.answer.clone()).or_default() += 1;
        let map = map_from_image(&s.input_images[0]).unwrap();
        let acts: Vec<Action> = s.question_text.split_whitespace().filter_map(Action::parse).collect();
        assert_eq!(simulate(&map, &acts).0.letter(), s.answer);
        assert!(s.o_post.ends_with(&format!("{} .", boxed(&s.answer))));
    }
    for letter in ["A", "B", "C"] {
        assert!(counts[letter] as f64 >= 0.15 * 3000.0, "{counts:?}");
    }
    assert_eq!(ds.questions().len(), 1000);
}

#[test]
fn plan_dataset_answers_verified() {
    let ds = build_dataset(TaskKind::Plan, 100, Split::Sft, 7, Variant::Cot).unwrap();
    for s in &ds.samples {
        let map = map_from_image(&s.input_images[0]).unwrap();
        let plan = parse_plan(&s.answer).unwrap();
        assert_eq!(simulate(&map, &plan).0, Outcome::Success);
        assert_eq!(Some(plan.len()), relaxation_distance(&codes_of(&map)));
    }
}

#[test]
fn datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for task in [TaskKind::Reason, TaskKind::Plan, TaskKind::Jigsaw] {
        let ds = build_dataset(task, 20, Split::Sft, 3, Variant::Cot).unwrap();
        let path = dir.path().join(dataset_file_name(task, Split::Sft, Variant::Cot));
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        for s in &ds.samples {
            assert_eq!(&TrajectorySample::from_json_line(&s.to_json_line().unwrap()).unwrap(), s);
        }
    }
    let line = build_dataset(TaskKind::Reason, 10, Split::Test, 3, Variant::Cot).unwrap().samples[0].to_json_line().unwrap();
    assert!(line.contains("1.0000000000000000e0"), "{line}");
}

#[test]
fn split_seeds_are_disjoint() {
    let sft = build_dataset(TaskKind::Reason, 10, Split::Sft, 42, Variant::Cot).unwrap();
    let test = build_dataset(TaskKind::Reason, 10, Split::Test, 42, Variant::Cot).unwrap();
    let rl = build_dataset(TaskKind::Reason, 10, Split::Rl, 42, Variant::Cot).unwrap();
    verify_disjoint(&sft, &test).unwrap();
    verify_disjoint(&rl, &test).unwrap();
    verify_disjoint(&sft, &rl).unwrap();
    let other = build_dataset(TaskKind::Reason, 10, Split::Sft, 43, Variant::Cot).unwrap();
    assert!(verify_disjoint(&sft, &other).is_err());
}

proptest! {
    #[test]
    fn sample_seeds_stay_in_partition(seed in any::<u64>(), i in 0u64..100_000) {
        for split in [Split::Sft, Split::Rl, Split::Test] {
            let (lo, hi) = split.seed_range();
            let s = sample_seed(split, seed, i);
            prop_assert!(lo <= s && s < hi);
        }
    }
}
