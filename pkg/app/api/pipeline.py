from flask import Blueprint, request, jsonify
import logging

from app.config import Config
from app.errors import PainterError, StageError
from app.services.pipeline import resolve_config, run_pipeline, scene_spec_from_config
from app.services.scene_model import NUSCENES_LABELS
from app.services.synth import generate_scene

logger = logging.getLogger(__name__)

pipeline_bp = Blueprint('pipeline', __name__)


@pipeline_bp.route("/pipeline", methods=["POST", "OPTIONS"])
def pipeline():
    """Run the painting pipeline on an in-memory config"""
    if request.method == "OPTIONS":
        return jsonify({"ok": True}), 200

    logger.info("=" * 80)
    logger.info("📥 ENDPOINT: /api/pipeline")
    logger.info("=" * 80)

    body = request.get_json(silent=True) or {}
    config = body.get('config') or {}
    overrides = body.get('overrides') or []
    if not isinstance(config, dict) or not isinstance(overrides, list):
        logger.error("❌ config must be an object and overrides a list")
        return jsonify({"error": "config must be an object and overrides a list"}), 400

    try:
        result = run_pipeline(config, overrides, output_dir=body.get('output_dir') or Config.OUTPUT_DIR)
    except StageError as e:
        logger.error(f"❌ Pipeline failed: {str(e)}")
        status = 400 if isinstance(e.cause, ValueError) else 500
        return jsonify({"error": str(e.cause), "stage": e.stage}), status

    response = {"metrics": result.metrics.to_json(), "artifacts": result.artifacts}
    logger.info(f"📤 Response: {response['metrics']}")
    return jsonify(response)


@pipeline_bp.route("/synth", methods=["POST", "OPTIONS"])
def synth():
    """Generate a synthetic scene and summarise it"""
    if request.method == "OPTIONS":
        return jsonify({"ok": True}), 200

    body = request.get_json(silent=True) or {}
    try:
        config = resolve_config({"synth": body.get('synth') or {}, "rig": body.get('rig') or {}})
        scene = generate_scene(scene_spec_from_config(config, seed=int(body.get('seed', Config.DEFAULT_SEED))))
    except (PainterError, ValueError, TypeError) as e:
        logger.error(f"❌ Synthetic scene rejected: {str(e)}")
        return jsonify({"error": str(e)}), 400

    summary = {
        "boxes": len(scene.boxes),
        "occluders": len(scene.occluders),
        "points": len(scene.points),
        "foreground_points": int((scene.point_gt >= 0).sum()),
        "instances_per_camera": [len(m.records) for m in scene.masks],
    }
    logger.info(f"✅ Scene summary: {summary}")
    return jsonify(summary)


@pipeline_bp.route("/labels", methods=["GET"])
def labels():
    """The active label table"""
    return jsonify({"labels": NUSCENES_LABELS.to_json()})
