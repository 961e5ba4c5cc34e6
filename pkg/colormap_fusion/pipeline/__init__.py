# Pipeline package