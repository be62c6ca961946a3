"""
app/core/exceptions.py
엔진 전역 예외 계층
"""


class BstError(Exception):
    """모든 엔진 예외의 기반 클래스"""


class ConfigError(BstError, ValueError):
    """설정 값 또는 파라미터 범위 오류"""


class ShapeError(BstError, ValueError):
    """텐서 shape 불일치"""


class EmbeddingLookupError(BstError, LookupError):
    """임베딩 테이블 범위를 벗어난 id 조회"""

    def __init__(self, column: str, bad_id: int, table_size: int):
        self.column = column
        self.bad_id = bad_id
        self.table_size = table_size
        super().__init__(
            f"'{column}' 컬럼 조회 실패: id {bad_id} 가 테이블 크기 {table_size} 범위를 벗어났습니다"
        )


class TapeError(BstError, RuntimeError):
    """테이프 기록/역전파 규약 위반"""


class NonFiniteError(BstError, FloatingPointError):
    """NaN 또는 Inf 값 감지"""

    def __init__(self, name: str, what: str = "값"):
        self.name = name
        super().__init__(f"'{name}' 에서 유한하지 않은 {what}이(가) 감지되었습니다")


class DatasetFormatError(BstError, ValueError):
    """데이터셋 라인 파싱 오류"""

    def __init__(self, path: str, line_number: int, field: str, message: str):
        self.path = path
        self.line_number = line_number
        self.field = field
        super().__init__(f"{path}:{line_number} 라인 파싱 실패 - 필드 '{field}': {message}")


class FeatureSpecError(BstError, ValueError):
    """피처 스펙 생성/로딩 오류"""


class CheckpointError(BstError):
    """체크포인트 저장/로딩 오류"""


class CheckpointVersionError(CheckpointError):
    """지원하지 않는 체크포인트 포맷 버전"""


class CheckpointCorruptError(CheckpointError):
    """매니페스트와 blob 불일치 (잘림, 오프셋 오류)"""


class CheckpointShapeError(CheckpointError):
    """체크포인트 텐서 shape 이 모델 구성과 다름"""


class MetricError(BstError, ValueError):
    """평가 지표 계산 불가 (예: 단일 클래스 AUC)"""


class AcceptanceError(BstError, AssertionError):
    """비교 실험의 기대 순서/마진 미충족"""


class MaskError(BstError, ValueError):
    """어텐션 행 전체가 마스킹됨 (길이 0 시퀀스)"""


class ChronologyError(BstError, ValueError):
    """이벤트 시각이 추천 시각보다 늦음 (음수 시간차)"""


class OverwriteRefusedError(BstError, FileExistsError):
    """--force 없이 기존 산출물 덮어쓰기 시도"""


class DatasetEmptyError(BstError, ValueError):
    """학습/평가 데이터가 비어 있음"""


class MissingArtifactError(BstError, FileNotFoundError):
    """필요한 입력 파일(데이터셋, 스펙, 체크포인트) 이 없음"""

    def __init__(self, path, what: str):
        self.path = str(path)
        super().__init__(f"{what} 파일이 없습니다: {path}")
