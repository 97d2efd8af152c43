//! Replays the attachment decisions for "The dog is happy" and prints the
//! stack and the depth tape after every token.

use pushdown::stack::{dump_replay, Span, StackState};
use pushdown::treebank::{
    attach_root, binarize, oracle_extract, parse_sexpr, precompute_tape_matrix,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (tree, words) = binarize(&parse_sexpr("(S (NP The dog) (VP is happy))")?);
    let rooted = attach_root(&tree);
    let r = oracle_extract(&rooted);
    println!("words: ROOT {}", words.join(" "));
    println!("attachments r: {r:?}\n");
    print!("{}", dump_replay(&r)?);

    // the step where "happy" reduces with "dog"
    let before = StackState::from_parts(
        vec![0, 1, 1, 0],
        vec![
            Span { start: 0, end: 0 },
            Span { start: 1, end: 2 },
            Span { start: 3, end: 3 },
        ],
    )
    .ok_or("inconsistent state")?;
    let after = before.update(4, 2)?;
    println!(
        "\nbefore happy: {:?}  after: {:?}",
        &before.tape()[1..],
        &after.tape()[1..]
    );

    let m = precompute_tape_matrix(r.len(), &r)?;
    println!("\ntape matrix (row k = depths after token k):");
    for k in 0..m.len() {
        println!("  {:?}", m.prefix_row(k));
    }
    Ok(())
}
