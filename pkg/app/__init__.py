"""
Instance Painter Application Factory
Flask service over the LiDAR/camera instance-painting pipeline
"""
import logging
from flask import Flask
from flask_cors import CORS
from app.config import Config

LOG_FORMAT = '%(asctime)s - [%(name)s] - %(levelname)s - %(message)s'


def configure_logging(level=None):
    logging.basicConfig(level=level or Config.LOG_LEVEL, format=LOG_FORMAT)


configure_logging()
logger = logging.getLogger(__name__)


def create_app(config_overrides=None):
    """Application factory pattern"""

    logger.info("=" * 80)
    logger.info("🚀 Initializing Instance Painter service")
    logger.info("=" * 80)

    app = Flask(__name__)
    app.config.from_object(Config)
    if config_overrides:
        app.config.update(config_overrides)
    app.secret_key = Config.SECRET_KEY

    try:
        Config.validate()
    except ValueError as e:
        logger.error(f"❌ Configuration Error: {e}")
        raise

    CORS(app,
         origins=[Config.FRONTEND_URL],
         allow_headers=['Content-Type'])
    logger.info(f"✅ CORS enabled for: {Config.FRONTEND_URL}")

    from app.api.pipeline import pipeline_bp
    app.register_blueprint(pipeline_bp, url_prefix='/api')
    logger.info("✅ API routes registered")

    @app.route('/health')
    def health_check():
        return {'status': 'healthy', 'service': 'instance-painter'}, 200

    logger.info("=" * 80)
    logger.info("✨ Instance Painter Ready!")
    logger.info(f"🌐 Running on: {Config.BACKEND_URL}")
    logger.info("=" * 80)

    return app
