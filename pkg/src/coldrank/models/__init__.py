from coldrank.models import base
from coldrank.models import cold
from coldrank.models import two_tower
from coldrank.models import checkpoint
from coldrank.models import evaluate
