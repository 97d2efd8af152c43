//! Samples bounded-depth Dyck strings, shows their gold trees and the two
//! generalization splits.

use std::collections::HashSet;

use pushdown::dyck::{
    build_depth_gen_split, build_longrange_split, dyck_gold_tree, sample_dyck, to_bracketed,
    DyckSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DyckSpec {
        num_types: 3,
        max_depth: 3,
        min_len: 4,
        max_len: 16,
        seed: 7,
        ..DyckSpec::default()
    };
    let train = sample_dyck(&spec, 2000)?;
    for s in train.iter().take(4) {
        println!("{:<40} {}", s.text(), to_bracketed(s));
        println!("{:<40} {}", "", dyck_gold_tree(s).to_bracketed());
    }
    let mut hist = [0usize; 4];
    for s in &train {
        hist[s.max_depth()] += 1;
    }
    println!(
        "\nmax depth histogram over {}: {:?}",
        train.len(),
        &hist[1..]
    );

    let deep = build_depth_gen_split(&spec, 5..=6, 3, 11)?;
    println!("\ndepth 5-6:");
    for s in &deep {
        println!("  depth {}  {}", s.max_depth(), s.text());
    }
    let seen: HashSet<u64> = train.iter().map(|s| s.hash64()).collect();
    let far = build_longrange_split(&spec, &[12], 3, 12, &seen)?;
    println!("\nlong range (distance >= 12):");
    for it in &far {
        println!(
            "  close {} at {} opened at {}: {} | {}",
            it.gold().token(),
            it.close_pos,
            it.open_pos,
            it.distance(),
            it.string.text()
        );
    }
    Ok(())
}
