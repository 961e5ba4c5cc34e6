# Evaluation package