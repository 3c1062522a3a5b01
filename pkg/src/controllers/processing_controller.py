import os
from dataclasses import dataclass, field

from src import config
from src.services.artifact_service import ArtifactService
from src.services.evaluation_service import EvalReport, EvaluationService
from src.services.fusion_service import FusionService
from src.services.geometry_service import GeometryService, SupportGraph
from src.services.imageset_service import ImageSetService
from src.services.probability_service import ProbabilityService
from src.services.synthetic_service import SyntheticService
from src.utils.validator import Validator
from src.utils.exceptions import AppError, NoSupportError
from src.logging_config import logger


@dataclass
class RunResult:
    output_dir: str
    processed: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)     # image id -> reason
    support_graph: SupportGraph | None = None
    report: EvalReport | None = None
    dynamic_maps: dict = field(default_factory=dict)


class ProcessingController:
    """
    The central controller that orchestrates a detection run: support graph,
    per-pair probability maps, fusion, artifacts and evaluation.
    """
    def __init__(self):
        self.image_set_service = ImageSetService()
        self.fusion_service = FusionService()
        self.evaluation_service = EvaluationService()
        self.artifact_service = ArtifactService()
        self.synthetic_service = SyntheticService(self.image_set_service, self.artifact_service)
        self.validator = Validator()
        logger.info("ProcessingController initialized.")

    def run(self, run_config: config.RunConfig) -> RunResult:
        """
        The main workflow method.

        Raises:
            NoSupportError: If no pair in the set has accepted geometry.
            AppError: If any step of loading, validation or processing fails.
        """
        try:
            logger.info(f"Starting detection run on: {run_config.input_dir}")
            self.validator.validate_run_config(run_config)

            # 1. Load the image set and optional ground truth
            image_set = self.image_set_service.load_image_set(run_config.input_dir)
            gts = self._load_ground_truth(run_config, image_set)

            # 2. Epipolar geometry and the support graph
            geometry_service = GeometryService(run_config)
            fmatrices = geometry_service.load_fmatrices(run_config.fmatrices) if run_config.fmatrices else {}
            graph = geometry_service.build_support_graph(
                image_set, run_config.seed, fmatrices=fmatrices, threads=run_config.threads
            ).limited(run_config.max_support)
            if graph.edge_count == 0:
                reasons = "; ".join(f"{a}|{b}: {why}" for (a, b), why in sorted(graph.failures.items()))
                raise NoSupportError(f"No image pair has accepted epipolar geometry. {reasons}", graph.failures)

            result = RunResult(output_dir=run_config.output_dir, support_graph=graph)
            for image_id in graph.ids:
                if graph.degree(image_id) == 0:
                    result.skipped[image_id] = "empty support set"
                    logger.warning(f"Skipping image '{image_id}': empty support set.")

            # 3. Per-pair matching probability maps
            probability_service = ProbabilityService(run_config)
            pair_maps, stats, sigma = probability_service.compute_maps(image_set, graph, threads=run_config.threads)

            # 4. Fusion into dynamic maps
            for image_id in graph.ids:
                if pair_maps.get(image_id):
                    result.dynamic_maps[image_id] = self.fusion_service.combine(pair_maps[image_id], image_id)
                    result.processed.append(image_id)

            # 5. Evaluation and artifacts
            if gts:
                result.report = self.evaluation_service.evaluate(result.dynamic_maps, gts, run_config.threshold)
            self._write_artifacts(run_config, image_set, graph, pair_maps, result, stats, sigma, probability_service)

            logger.info(f"Run finished: {len(result.processed)} image(s) processed, {len(result.skipped)} skipped.")
            return result

        except AppError as e:
            # Catch our known application errors, log them, and re-raise
            logger.error(f"An application error occurred during processing: {e}", exc_info=True)
            raise e
        except Exception as e:
            # Catch any other unexpected errors
            logger.critical(f"An unexpected critical error occurred: {e}", exc_info=True)
            raise AppError("An unexpected error occurred. Please check the logs.")

    def synthesize(self, preset: str, output_dir: str, seed: int = config.SEED,
                   width: int = 640, height: int = 480, threads: int = 1):
        """Renders a synthetic preset into `output_dir`."""
        try:
            scene = self.synthetic_service.build_scene(preset, seed=seed, width=width, height=height)
            return self.synthetic_service.write(scene, output_dir, threads=threads)
        except AppError as e:
            logger.error(f"An application error occurred during synthesis: {e}", exc_info=True)
            raise e
        except Exception as e:
            logger.critical(f"An unexpected critical error occurred: {e}", exc_info=True)
            raise AppError("An unexpected error occurred. Please check the logs.")

    def _load_ground_truth(self, run_config: config.RunConfig, image_set) -> dict:
        gt_dir = run_config.gt_dir
        if not gt_dir:
            sibling = os.path.join(run_config.input_dir, config.GROUND_TRUTH_DIRNAME)
            gt_dir = sibling if os.path.isdir(sibling) else ""
        if not gt_dir:
            logger.info("No ground truth supplied; evaluation is skipped.")
            return {}
        self.validator.validate_directory(gt_dir)
        return self.image_set_service.load_ground_truth_dir(gt_dir, image_set)

    def _write_artifacts(self, run_config, image_set, graph, pair_maps, result, stats, sigma, probability_service):
        out = run_config.output_dir
        artifacts = self.artifact_service
        protocol = run_config.threshold_protocol

        for image_id, dmap in result.dynamic_maps.items():
            artifacts.write_probability_map(os.path.join(out, f"dynmap_{image_id}.png"), dmap.dynamic)
            artifacts.write_heatmap(os.path.join(out, f"dynmap_{image_id}_heat.png"), dmap.dynamic)
            t = result.report.threshold_for(image_id, protocol) if result.report else run_config.threshold
            mask = self.fusion_service.threshold(dmap, t)
            artifacts.write_mask(os.path.join(out, f"mask_{image_id}.png"), mask)
            artifacts.write_overlay(os.path.join(out, f"overlay_{image_id}.png"), image_set.get(image_id), mask)

            if run_config.debug_patches:
                for pmap in pair_maps[image_id]:
                    stem = f"{image_id}_{pmap.support_id}"
                    artifacts.write_probability_map(os.path.join(out, "debug", f"pmap_{stem}.png"), pmap.probability)
                    patch_set = probability_service.reference_patches(
                        image_set.get(image_id), graph.geometry(image_id, pmap.support_id)
                    )
                    artifacts.write_patch_svg(os.path.join(out, "debug", f"patches_{stem}.svg"), patch_set)

        artifacts.write_json(os.path.join(out, "support_graph.json"), graph.to_dict())
        metrics = {
            "set": {
                "name": image_set.name,
                "set_size": len(image_set),
                "average_support_size": round(graph.average_support_size(), 6),
            },
            "images": {
                image.id: {
                    "width": image.width,
                    "height": image.height,
                    "supports": graph.supports(image.id),
                    "status": "processed" if image.id in result.dynamic_maps else "skipped",
                    "reason": result.skipped.get(image.id, ""),
                }
                for image in image_set
            },
            "normalization": stats.to_dict(),
            "sigma": round(sigma, 6),
            "threshold_protocol": protocol,
            "evaluation": result.report.to_dict() if result.report else None,
        }
        artifacts.write_json(os.path.join(out, "metrics.json"), metrics)
