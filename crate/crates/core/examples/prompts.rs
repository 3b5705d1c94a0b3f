//! Prints the QA and judge prompts, and how judge replies are parsed.

use longqa::genclient::{build_judge_prompt, build_qa_prompt, parse_judge_output};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let question = "गाँव में बारिश कम क्यों होती है?";
    let context = "पहाड़ बादलों को रोक लेते हैं।\n\nइसलिए बारिश दूसरी ओर होती है।";

    println!("--- inference prompt ---\n{}", build_qa_prompt(question, context, None)?);
    println!("--- training prompt ---\n{}", build_qa_prompt(question, context, Some("पहाड़ बादल रोकते हैं।"))?);
    println!(
        "--- judge prompt ---\n{}\n",
        build_judge_prompt(question, "पहाड़ बादल रोकते हैं।", "बादल रुक जाते हैं।", "पता नहीं।")?
    );

    for reply in ["option1", "  Option2.\n", "I think option2 is closer", "both are fine"] {
        match parse_judge_output(reply) {
            Ok(choice) => println!("{reply:?} -> {choice}"),
            Err(e) => println!("{reply:?} -> {e}"),
        }
    }
    Ok(())
}
