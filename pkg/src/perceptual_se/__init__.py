"""Speech enhancement trained with a phonetic perceptual loss."""
