from coldrank.engine import serving
from coldrank.engine import client
from coldrank.engine import bench
from coldrank.engine import service
