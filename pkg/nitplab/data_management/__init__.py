# On-disk artifacts of a run: corpus, checkpoints and metrics log.
