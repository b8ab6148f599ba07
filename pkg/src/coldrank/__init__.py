from coldrank import utils
from coldrank import exceptions
from coldrank import numerics
from coldrank import features
from coldrank import metrics
from coldrank import reports
from coldrank import models
from coldrank import data
from coldrank import training
from coldrank import engine
from coldrank import selection
from coldrank import config
