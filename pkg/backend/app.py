"""
Flask API for the SAE-Steering pipeline
Validates run configs, runs the pipeline and serves emitted reports
"""

import os
import traceback

from flask import Flask, jsonify, request
from flask_cors import CORS

from backend.config import RunConfig, default_output_dir
from backend.errors import ConfigError, InvalidArgumentError, StageError
from backend.pipeline import run_pipeline
from backend.report import REPORT_JSON, load_report

app = Flask(__name__)
CORS(app)


def _config_from_request(data) -> RunConfig:
    """Body is {"section": {"key": value}, ...}; [run] may carry seed and output_dir"""
    if data is None:
        data = {}
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise ConfigError(["request body must be an object of sections"])
    return RunConfig.from_dict(data).validate()


@app.route('/api/config', methods=['POST'])
def check_config():
    """
    Validate a config and echo it back with every default filled in
    """
    try:
        config = _config_from_request(request.get_json(silent=True))
        return jsonify({
            'success': True,
            'config': config.to_dict()
        }), 200

    except ConfigError as e:
        return jsonify({
            'success': False,
            'error': 'Invalid configuration',
            'problems': e.problems
        }), 400


@app.route('/api/run', methods=['POST'])
def run():
    """
    Run every pipeline stage with the posted config
    Returns the run report
    """
    try:
        config = _config_from_request(request.get_json(silent=True))
        resume = request.args.get('resume', 'false').lower() == 'true'
        report = run_pipeline(config, resume=resume)

        return jsonify({
            'success': True,
            'output_dir': config.output_dir,
            'report': report.to_dict()
        }), 200

    except ConfigError as e:
        return jsonify({
            'success': False,
            'error': 'Invalid configuration',
            'problems': e.problems
        }), 400
    except InvalidArgumentError as e:
        return jsonify({
            'success': False,
            'error': str(e)
        }), 400
    except StageError as e:
        return jsonify({
            'success': False,
            'error': str(e),
            'stage': e.stage
        }), 500
    except Exception as e:
        return jsonify({
            'success': False,
            'error': f'Internal server error: {str(e)}',
            'traceback': traceback.format_exc()
        }), 500


@app.route('/api/report', methods=['GET'])
def report():
    """
    Serve report.json of a finished run
    """
    output_dir = request.args.get('output_dir', default_output_dir())
    path = os.path.join(output_dir, REPORT_JSON)
    if not os.path.exists(path):
        return jsonify({
            'success': False,
            'error': f'No report in {output_dir}'
        }), 404

    try:
        return jsonify({
            'success': True,
            'report': load_report(path).to_dict()
        }), 200
    except (ValueError, InvalidArgumentError) as e:
        return jsonify({
            'success': False,
            'error': f'Unreadable report: {str(e)}'
        }), 500


@app.route('/health', methods=['GET'])
def health():
    """Health check endpoint"""
    return jsonify({
        'status': 'healthy',
        'service': 'SAE-Steering API'
    }), 200


if __name__ == '__main__':
    app.run(host='0.0.0.0', port=5000, debug=True)
