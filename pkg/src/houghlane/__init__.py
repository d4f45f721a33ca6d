"""Lane detection with a differentiable Deep Hough Transform."""
