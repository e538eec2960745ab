"""Self-normalising U-Net for 2-D ultrasound segmentation and its agreement metrics."""
