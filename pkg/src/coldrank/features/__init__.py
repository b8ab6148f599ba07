from coldrank.features import schema
from coldrank.features import dataset
from coldrank.features import batch
