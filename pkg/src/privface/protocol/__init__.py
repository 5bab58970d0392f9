from .client import (Client, DetectionResult, ProtocolError, user_detect, user_detect_full,
                     user_query, user_query_raw, user_upload, vendor_publish)
from .messages import (Ack, DetectRequest, DetectResponse, ErrorCode, ErrorReply, MatchedPhoto,
                       MatchRequest, MatchResponse, RegisterDetector, UploadPhotos, WindowGeometry,
                       WireError, decode, encode)
from .server import CloudServer, ServerState
from .transport import InProcessTransport, SocketTransport, TcpServer, parse_address, serve
