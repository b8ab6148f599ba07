from coldrank.training import bus
from coldrank.training import trainer
from coldrank.training import train_models
from coldrank.training import experiments
