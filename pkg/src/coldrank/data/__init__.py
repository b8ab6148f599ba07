from coldrank.data import generator
from coldrank.data import prepare
