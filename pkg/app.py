"""
Encrypted policy-synthesis server.

Receives an encrypted Grid-World model plus Enc(Z_0) from a client, runs the
encrypted value iteration and returns Enc(Z_T). The server never holds the
secret key.

Run locally:
python app.py

Deploy with gunicorn:
web: gunicorn app:app
"""

import logging
import os
import threading

from dotenv import load_dotenv
from flask import Flask, Response, jsonify, request

from errors import HerlError
from he_backend import BACKENDS, SECURITY_BANNER
from outsourcing import MSG_ERROR, PROTOCOL_VERSION, encode_frame, handle_request

load_dotenv()

logging.basicConfig(level=os.environ.get('HERL_LOG_LEVEL', 'INFO').upper(),
                    format='%(asctime)s %(levelname)s %(name)s %(message)s')
logger = logging.getLogger(__name__)

try:
    import reportlab  # noqa: F401
    REPORTLAB_AVAILABLE = True
except ImportError:
    REPORTLAB_AVAILABLE = False
    logger.warning('[Server] reportlab not available, PDF reports disabled')

app = Flask(__name__)

# one synthesis job at a time
_JOB_LOCK = threading.Lock()

logger.warning(SECURITY_BANNER)


@app.after_request
def after_request(response):
    response.headers.add('Access-Control-Allow-Origin', '*')
    response.headers.add('Access-Control-Allow-Headers', 'Content-Type')
    response.headers.add('Access-Control-Allow-Methods', 'GET,POST,OPTIONS')
    return response


@app.errorhandler(HerlError)
def herl_error(e):
    status = 400 if e.exit_code == 2 else 500
    return jsonify(e.to_dict()), status


@app.route('/health', methods=['GET'])
def health():
    return jsonify({
        'status': 'healthy',
        'service': 'herl-synthesis-server',
        'protocol_version': PROTOCOL_VERSION,
        'capabilities': {
            'backends': list(BACKENDS),
            'pdf_report': REPORTLAB_AVAILABLE,
        },
        'busy': _JOB_LOCK.locked(),
    })


@app.route('/synthesize', methods=['POST'])
def synthesize():
    """
    Run one encrypted synthesis job.

    Body: model frame followed by state frame (application/octet-stream).
    Returns the result frame, or an error frame with status 400/500.
    """
    data = request.get_data()
    if not data:
        payload = encode_frame(MSG_ERROR, b'{"error": "empty request body", "kind": "ProtocolError"}')
        return Response(payload, status=400, mimetype='application/octet-stream')
    with _JOB_LOCK:
        logger.info('[Server] received %d bytes', len(data))
        payload, status = handle_request(data)
    return Response(payload, status=status, mimetype='application/octet-stream')


if __name__ == '__main__':
    port = int(os.environ.get('PORT', 5000))
    app.run(host='0.0.0.0', port=port, debug=False)
