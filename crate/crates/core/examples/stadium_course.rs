//! Prints the default stadium course as JSON.
//!
//! `cargo run -p riskfield --example stadium_course > data/stadium.json`

use riskfield::course::{stadium, StadiumLayout};

fn main() {
    let course = stadium(&StadiumLayout::default()).expect("default layout is valid");
    print!("{}", course.to_json());
}
