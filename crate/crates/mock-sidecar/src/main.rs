use distill_core::backend::MockWorld;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = match std::env::var("MOCK_WORLD") {
        Ok(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        Err(_) => {
            let n = std::env::var("MOCK_CLASSES").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
            MockWorld::planted(n, 0)
        }
    };
    let port = std::env::var("PORT").unwrap_or_else(|_| "8080".into());
    let app = mock_sidecar::router(world)?;
    let listener = tokio::net::TcpListener::bind(format!("0.0.0.0:{port}")).await?;
    eprintln!("mock sidecar listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
