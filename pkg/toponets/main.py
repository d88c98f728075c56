from functools import lru_cache

from fastapi import Depends, FastAPI, HTTPException, status

from toponets.config import configure_logging, get_settings
from toponets.errors import (ImpossibleEvidenceError, MapError, SpnFormatError, SpnInputError, TemplateDataError,
                             TopoNetsError, UntrainedModelError)
from toponets.models import InferenceRequest, InferenceResponse
from toponets.semmap import SemanticMap, catalogue_for, map_from_document
from toponets.toponet import (InstantiatedToponet, ToponetModel, classify_places, infer_placeholders, instantiate,
                              load_toponet, novelty_score)

configure_logging()

app = FastAPI(title="TopoNets Inference API", version="1.0.0")

# Problems with the submitted map or parameters
INPUT_ERRORS = (MapError, SpnInputError, ImpossibleEvidenceError, TemplateDataError)
# Problems with the loaded model
MODEL_ERRORS = (UntrainedModelError, SpnFormatError)


@lru_cache(maxsize=1)
def get_model() -> ToponetModel:
    directory = get_settings().model_dir
    try:
        return load_toponet(directory)
    except (OSError, TopoNetsError) as exc:
        raise HTTPException(status_code=status.HTTP_409_CONFLICT,
                            detail=f"No usable model in {directory}: {exc}") from exc


def _prepare(request: InferenceRequest, model: ToponetModel):
    if any(node.grid_ref for node in request.map.nodes):
        raise HTTPException(status_code=400, detail="Grids must be sent inline, not as file references")
    try:
        semantic_map = map_from_document(request.map)
    except MapError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    if not model.trained:
        raise HTTPException(status_code=409, detail="Model has not been trained")
    if catalogue_for(semantic_map.class_set).num_classes != model.num_classes:
        raise HTTPException(status_code=409,
                            detail=f"Map uses {semantic_map.class_set}, model has {model.num_classes} classes")
    return semantic_map


def _run(task, request: InferenceRequest, model: ToponetModel):
    semantic_map = _prepare(request, model)
    try:
        inst = instantiate(model, semantic_map, request.n_decompositions, request.seed)
        return task(inst, semantic_map)
    except INPUT_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except MODEL_ERRORS as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/classify", response_model=InferenceResponse)
def classify(request: InferenceRequest, model: ToponetModel = Depends(get_model)):
    predictions = _run(classify_places, request, model)
    return InferenceResponse(places=[p.to_record() for p in predictions.values()])


@app.post("/placeholders", response_model=InferenceResponse)
def placeholders(request: InferenceRequest, model: ToponetModel = Depends(get_model)):
    predictions = _run(infer_placeholders, request, model)
    return InferenceResponse(places=[p.to_record() for p in predictions.values()])


@app.post("/novelty", response_model=InferenceResponse)
def novelty(request: InferenceRequest, model: ToponetModel = Depends(get_model)):
    def score(inst: InstantiatedToponet, semantic_map: SemanticMap):
        return novelty_score(inst, semantic_map, request.threshold)

    return InferenceResponse(novelty=_run(score, request, model).to_record())


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="127.0.0.1", port=8000)
