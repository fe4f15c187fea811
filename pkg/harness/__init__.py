# Training, evaluation and reporting harness for the accent adapter laboratory
