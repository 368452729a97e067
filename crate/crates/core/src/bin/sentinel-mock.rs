use clap::Parser;
use sentinel::service::{run_mock, MockServiceConfig};

#[tokio::main]
async fn main() {
    let cfg = MockServiceConfig::parse();
    std::process::exit(run_mock(cfg).await);
}
