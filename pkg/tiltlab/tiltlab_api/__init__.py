__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'
