"""One-class image anomaly detection with a dense-skip GAN."""
