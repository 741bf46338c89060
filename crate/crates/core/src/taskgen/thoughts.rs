use crate::taskgen::{simulate, Action, GridMap, Variant};

const STEP_VERBS: [&str; 3] = ["moving", "go", "step"];
const JIGSAW_VERBS: [&str; 3] = ["try", "test", "insert"];

/// What the thought templates need to know about one task instance.
pub enum TaskInstance<'a> {
    Reason { map: &'a GridMap, actions: &'a [Action], prefix_len: usize },
    Plan { map: &'a GridMap, path: &'a [Action], prefix_len: usize },
    Jigsaw { inserted: &'a str, correct: &'a str },
}

pub fn boxed(answer: &str) -> String {
    format!("\\boxed{{ {answer} }}")
}

fn answer_sentence(answer: &str) -> String {
    format!("the answer is {} .", boxed(answer))
}

fn step_sentences(map: &GridMap, actions: &[Action], verb: &str) -> Vec<String> {
    let (_, trace) = simulate(map, actions);
    trace[1..]
        .iter()
        .zip(actions)
        .map(|(&(r, c), a)| format!("{verb} {} to ( {r} , {c} ) {} .", a.word(), map.tile((r, c)).word()))
        .collect()
}

/// Templated reasoning chain split around the helper image. Phrasing is
/// `rng_seed % 3`; the direct variant has no thoughts, only the answer.
pub fn synthesize_thoughts(task: &TaskInstance<'_>, answer: &str, variant: Variant, rng_seed: u64) -> (String, String) {
    if variant == Variant::Direct {
        return (String::new(), answer_sentence(answer));
    }
    let phrasing = (rng_seed % 3) as usize;
    let (pre, post): (Vec<String>, Vec<String>) = match *task {
        TaskInstance::Reason { map, actions, prefix_len } | TaskInstance::Plan { map, path: actions, prefix_len } => {
            let mut steps = step_sentences(map, actions, STEP_VERBS[phrasing]);
            let post = steps.split_off(prefix_len.min(steps.len()));
            (steps, post)
        }
        TaskInstance::Jigsaw { inserted, correct } => {
            let pre = format!("{} candidate {inserted} .", JIGSAW_VERBS[phrasing]);
            let verdict = if inserted == correct { "match" } else { "break" };
            (vec![pre], vec![format!("the seams {verdict} so {correct} is correct .")])
        }
    };
    let mut o_pre = vec!["<think>".to_string()];
    o_pre.extend(pre);
    let mut o_post = post;
    o_post.push("</think>".into());
    o_post.push(answer_sentence(answer));
    (o_pre.join(" "), o_post.join(" "))
}
