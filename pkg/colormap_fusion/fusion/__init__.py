# Fusion stages package