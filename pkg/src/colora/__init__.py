"""CoLoRA: mergeable depthwise x pointwise residuals for frozen convolutions."""
