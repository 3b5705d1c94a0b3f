//! Talks to a model service over HTTP. Without `LONGQA_BACKEND_URL` set, a
//! loopback server wrapping the mock backend stands in for the service.

use std::sync::Arc;

use longqa::backend::{Backend, HttpBackend};
use longqa::genclient::{build_qa_prompt, GenerationRequest};
use longqa::mockbackend::{LoopbackServer, MockBackend, MockConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (_server, url) = match std::env::var("LONGQA_BACKEND_URL") {
        Ok(url) => (None, url),
        Err(_) => {
            let server = LoopbackServer::start(Arc::new(MockBackend::new(MockConfig::default())?))?;
            let url = server.url();
            (Some(server), url)
        }
    };
    let client = HttpBackend::new(&url).with_api_key(std::env::var("LONGQA_API_KEY").ok());
    println!("backend {}", client.identity());

    for m in client.health()? {
        println!("  {:<10} {:?} dim={:?}", m.model_id, m.kind, m.dim);
    }
    let texts = vec!["नमस्ते".to_string(), "வணக்கம்".to_string()];
    let vectors = client.embed_sentences("labse", &texts)?;
    println!("embedded {} texts, dim {}", vectors.len(), vectors[0].len());
    let logits = client.score("aps", &[("q".into(), "a passage".into())])?;
    println!("relevance logit {:.3}", logits[0]);
    let prompt = build_qa_prompt("what is said?", "hello from the context", None)?;
    println!("generated: {:?}", client.generate(&GenerationRequest::new("mock-echo", prompt, 0))?);
    Ok(())
}
